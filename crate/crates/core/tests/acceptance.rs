//! End-to-end acceptance checks. Runs every criterion, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use gemma_mini::attention::{build_mask, gqa_attend, AttentionConfig, LayerKind};
use gemma_mini::audit::{classify, levenshtein, make_samples, run_audit, Continuation, Memorization};
use gemma_mini::distill::{distill_grad_check, distill_loss, renormalize};
use gemma_mini::kvcache::kv_bytes;
use gemma_mini::memplan::{report, DEFAULT_CONTEXT, DEFAULT_KV_BITS};
use gemma_mini::model::train::{eval_ce, train_lm, TrainOptions};
use gemma_mini::model::{
    argmax, format_chat, layer_kinds, tokenize, ChatTurn, GenerateOptions, BOS_ID, END_OF_TURN_ID,
    PRESET_NAMES, START_OF_TURN_ID,
};
use gemma_mini::panscan::{plan_crops, pool_embeddings, PanScanConfig, Rect};
use gemma_mini::tensor::{dot, matmul, matmul_transposed, rope_apply, softmax_rows};
use gemma_mini::{CacheMode, Matrix, Model, ModelConfig, RopeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn within_time(t: Instant, limit: Duration, msg: String) -> Outcome {
    let e = t.elapsed();
    ensure!(e < limit, "{msg}; took {e:.2?}, limit {limit:?}");
    Ok(format!("{msg}; {e:.2?}"))
}

fn bf16_column() -> Outcome {
    let t = Instant::now();
    let want = [2.0, 8.0, 24.0, 54.0];
    let mut got = Vec::new();
    let mut bad = Vec::new();
    for (name, w) in PRESET_NAMES.iter().zip(want) {
        let r = report(name, DEFAULT_CONTEXT, DEFAULT_KV_BITS).map_err(|e| e.to_string())?;
        let gb = r.rows[0].weights_gb;
        let rel = (gb - w).abs() / w;
        got.push(format!("{name} {gb:.3}"));
        if rel > 0.02 {
            bad.push(format!("{name}: {gb:.3} GB vs {w} GB ({:.1}% off)", rel * 100.0));
        }
    }
    ensure!(bad.is_empty(), "{}", bad.join(", "));
    within_time(t, Duration::from_secs(1), got.join(", "))
}

fn kv_deltas() -> Outcome {
    let contexts = [0, 1, 1023, 1024, 4096, 32_768, 131_072];
    for name in PRESET_NAMES {
        for &ctx in &contexts {
            for bits in [4, 8, 16] {
                let r = report(name, ctx, bits).map_err(|e| e.to_string())?;
                let deltas: Vec<u64> = r.rows.iter().map(|x| x.total_bytes - x.weights_bytes).collect();
                ensure!(
                    deltas.iter().all(|&d| d == r.kv_bytes),
                    "{name} ctx {ctx} bits {bits}: deltas {deltas:?}"
                );
            }
        }
    }
    Ok(format!("{} presets x {} contexts x 3 kv widths", PRESET_NAMES.len(), contexts.len()))
}

fn kv_ratio() -> Outcome {
    let ratio = |local_per_global, window| {
        let p = layer_kinds(6, local_per_global);
        let g = vec![LayerKind::Global; 6];
        kv_bytes(&p, 32_768, window, 1, 256, 16).total as f64 / kv_bytes(&g, 32_768, window, 1, 256, 16).total as f64
    };
    let (a, b) = (ratio(5, 1024), ratio(1, 4096));
    ensure!((a - 0.19271).abs() <= 1e-4, "5:1/1024 ratio {a}");
    ensure!((b - 0.5625).abs() <= 1e-4, "1:1/4096 ratio {b}");
    Ok(format!("5:1/1024 {a:.5}, 1:1/4096 {b:.5}"))
}

fn interleaving() -> Outcome {
    for n in 1..100 {
        let kinds = layer_kinds(n, 5);
        ensure!(kinds.len() == n, "n {n}: {} kinds", kinds.len());
        for (i, k) in kinds.iter().enumerate() {
            let want = if i % 6 == 5 { LayerKind::Global } else { LayerKind::Local };
            ensure!(*k == want, "n {n}, layer {i}: {k:?}");
        }
    }
    Ok("n = 1..99".into())
}

fn sliding_window() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_attn = 0.0f64;
    for trial in 0..20 {
        let seq = rng.gen_range(1..40);
        let cfg = |kind, window| AttentionConfig {
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            kind,
            window,
            rope: RopeParams::new(RopeParams::LOCAL_BASE, 1.0, 8).unwrap(),
        };
        let (q, k, v) = (random(seq, 32, &mut rng), random(seq, 16, &mut rng), random(seq, 16, &mut rng));
        let pos: Vec<usize> = (0..seq).collect();
        let window = seq + trial % 3;
        let lc = cfg(LayerKind::Local, Some(window));
        let gc = cfg(LayerKind::Global, None);
        let l = gqa_attend(&q, &k, &v, &lc, &build_mask(LayerKind::Local, &pos, &pos, Some(window)).unwrap()).unwrap();
        let g = gqa_attend(&q, &k, &v, &gc, &build_mask(LayerKind::Global, &pos, &pos, None).unwrap()).unwrap();
        worst_attn = worst_attn.max(l.max_abs_diff(&g));
    }
    let mut worst_model = 0.0f64;
    for seed in 0..4 {
        let mut cfg = ModelConfig::tiny(3, 2, 64);
        cfg.attn_global.rope = cfg.attn_local.rope;
        let local = Model::init(cfg.clone(), seed).unwrap();
        cfg.local_per_global = 0;
        let global = Model::new(cfg, local.weights.clone()).unwrap();
        let toks: Vec<u32> = (0..48).map(|_| rng.gen_range(0..256)).collect();
        let a = local.forward(&toks, None).unwrap();
        let b = global.forward(&toks, None).unwrap();
        worst_model = worst_model.max(a.max_abs_diff(&b));
    }
    ensure!(worst_attn < 1e-12 && worst_model < 1e-12, "local vs global: attention {worst_attn:e}, model {worst_model:e}");

    let model = Model::init(ModelConfig::tiny(6, 5, 16), 3).unwrap();
    let prompt: Vec<u32> = vec![BOS_ID, 72, 101, 108, 108, 111];
    let opts = GenerateOptions { max_new: 200, cache_mode: CacheMode::Windowed, ..Default::default() };
    let cached = model.generate(&prompt, &opts).unwrap();
    let mut seq = prompt.clone();
    let mut worst_decode = 0.0f64;
    let mut cache = model.new_cache(CacheMode::Windowed);
    let mut step_logits = model.forward(&prompt, Some(&mut cache)).unwrap();
    for _ in 0..200 {
        let full = model.forward(&seq, None).unwrap();
        let last_full = full.row(full.rows() - 1);
        let last_cached = step_logits.row(step_logits.rows() - 1);
        for (a, b) in last_full.iter().zip(last_cached) {
            worst_decode = worst_decode.max((a - b).abs());
        }
        let next = argmax(last_full);
        seq.push(next);
        step_logits = model.forward(&[next], Some(&mut cache)).unwrap();
    }
    ensure!(worst_decode < 1e-9, "windowed decode vs recompute: {worst_decode:e}");
    ensure!(cached == seq, "generate() diverged from full-recompute greedy decode");
    within_time(
        t,
        Duration::from_secs(30),
        format!("local/global {:.1e}/{:.1e}, 200-step decode {worst_decode:.1e}", worst_attn, worst_model),
    )
}

fn rope_rescaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hd = 16;
    let s1 = RopeParams::new(RopeParams::GLOBAL_BASE, 1.0, hd).unwrap();
    let s8 = RopeParams::new(RopeParams::GLOBAL_BASE, 8.0, hd).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (rng.gen_range(0..20_000usize), rng.gen_range(0..20_000usize));
        let q = random(1, hd, &mut rng);
        let k = random(1, hd, &mut rng);
        let base = dot(rope_apply(&q, &[a], &s1).unwrap().row(0), rope_apply(&k, &[b], &s1).unwrap().row(0));
        let scaled = dot(rope_apply(&q, &[8 * a], &s8).unwrap().row(0), rope_apply(&k, &[8 * b], &s8).unwrap().row(0));
        worst = worst.max((base - scaled).abs());
    }
    ensure!(worst < 1e-9, "max logit difference {worst:e}");
    Ok(format!("200 random pairs, max diff {worst:.1e}"))
}

fn gqa_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hd = 8;
    let mut worst = 0.0f64;
    for (nq, nkv) in [(4, 1), (4, 2), (8, 8)] {
        let seq = 9;
        let cfg = AttentionConfig {
            num_query_heads: nq,
            num_kv_heads: nkv,
            head_dim: hd,
            kind: LayerKind::Local,
            window: Some(4),
            rope: RopeParams::new(RopeParams::LOCAL_BASE, 1.0, hd).unwrap(),
        };
        let q = random(seq, nq * hd, &mut rng);
        let k = random(seq, nkv * hd, &mut rng);
        let v = random(seq, nkv * hd, &mut rng);
        let pos: Vec<usize> = (0..seq).collect();
        let mask = build_mask(LayerKind::Local, &pos, &pos, Some(4)).unwrap();
        let got = gqa_attend(&q, &k, &v, &cfg, &mask).unwrap();
        // Replicate each kv head for its query group, then plain per-head attention.
        let group = nq / nkv;
        let mut heads = Vec::new();
        for h in 0..nq {
            let qh = q.col_slice(h * hd, hd).unwrap();
            let kh = k.col_slice((h / group) * hd, hd).unwrap();
            let vh = v.col_slice((h / group) * hd, hd).unwrap();
            let logits = matmul_transposed(&qh, &kh).unwrap().scale(1.0 / (hd as f64).sqrt()).add(&mask).unwrap();
            heads.push(matmul(&softmax_rows(&logits).unwrap(), &vh).unwrap());
        }
        let want = Matrix::concat_cols(&heads).unwrap();
        worst = worst.max(got.max_abs_diff(&want));
    }
    ensure!(worst < 1e-12, "max diff {worst:e}");
    Ok(format!("(4,1) (4,2) (8,8), max diff {worst:.1e}"))
}

fn distillation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vocab = 50;
    let mut worst_ce = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for _ in 0..50 {
        let w: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let teacher: Vec<f64> = w.iter().map(|x| x / s).collect();
        let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();

        let full = renormalize(&teacher, &(0..vocab).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let ce: f64 = teacher.iter().zip(&logits).map(|(p, z)| -p * (z - lse)).sum();
        worst_ce = worst_ce.max((distill_loss(&logits, &full) - ce).abs());

        let support: Vec<usize> = (0..vocab - 1).filter(|_| rng.gen_bool(0.3)).chain([vocab - 1]).collect();
        let target = renormalize(&teacher, &support).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(distill_grad_check(&logits, &target, 1e-5));
        for (a, (&i, &ti)) in support.iter().zip(&target.probs).enumerate() {
            for (&j, &tj) in support.iter().zip(&target.probs).skip(a + 1) {
                let rel = (ti / tj) / (teacher[i] / teacher[j]) - 1.0;
                worst_ratio = worst_ratio.max(rel.abs());
            }
        }
    }
    ensure!(worst_ce < 1e-12, "full-support loss vs teacher CE: {worst_ce:e}");
    ensure!(worst_grad < 1e-5, "gradient check relative error {worst_grad:e}");
    ensure!(worst_ratio <= 4.0 * f64::EPSILON, "in-support ratio drift {worst_ratio:e}");
    Ok(format!("ce {worst_ce:.1e}, grad rel err {worst_grad:.1e}, ratio drift {worst_ratio:.1e}"))
}

const PANGRAMS: &str = "Sphinx of black quartz, judge my vow. The five boxing wizards jump quickly. \
Amazingly few discotheques provide jukeboxes. How razorback-jumping frogs can level six piqued gymnasts! Cozy lummox gives smart squid who asks for job pen.";

fn toy_training() -> Outcome {
    let t = Instant::now();
    let doc = tokenize(&PANGRAMS[..200], false);
    ensure!(doc.len() == 200, "corpus has {} bytes", doc.len());
    let mut model = Model::init(ModelConfig::tiny(2, 1, 256), 0).unwrap();
    let opts = TrainOptions { steps: 500, lr: 1e-2, seq_len: 200, seed: 0, linear_decay: false };
    train_lm(&mut model, std::slice::from_ref(&doc), &opts, |_, _, _| {}).map_err(|e| e.to_string())?;
    let ce = eval_ce(&model, std::slice::from_ref(&doc), 256).map_err(|e| e.to_string())?;
    ensure!(ce < 0.1, "mean CE {ce:.4} after 500 steps");
    within_time(t, Duration::from_secs(60), format!("mean CE {ce:.2e} after 500 steps"))
}

fn pan_and_scan() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let (w, h, m) = (rng.gen_range(1..6000), rng.gen_range(1..6000), rng.gen_range(1..10));
        let cfg = PanScanConfig { max_crops: m, ..Default::default() };
        let p = plan_crops(w, h, &cfg).map_err(|e| e.to_string())?;
        let area: usize = p.crops.iter().map(Rect::area).sum();
        ensure!(area == w * h, "{w}x{h}/{m}: crop area {area}");
        for (i, a) in p.crops.iter().enumerate() {
            ensure!(a.x + a.w <= w && a.y + a.h <= h, "{w}x{h}/{m}: {a:?} outside");
            for b in &p.crops[i + 1..] {
                ensure!(!a.intersects(b), "{w}x{h}/{m}: {a:?} overlaps {b:?}");
            }
        }
        ensure!(p.crops.len() <= m || !p.applied, "{w}x{h}/{m}: {} crops", p.crops.len());
        let ws: Vec<usize> = p.crops.iter().map(|r| r.w).collect();
        let hs: Vec<usize> = p.crops.iter().map(|r| r.h).collect();
        let spread = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap();
        ensure!(spread(&ws) <= 1 && spread(&hs) <= 1, "{w}x{h}/{m}: unequal crops {ws:?} {hs:?}");
    }
    let (g, d) = (64, 6);
    let grid = random(g * g, d, &mut rng);
    let pooled = pool_embeddings(&grid, 16).map_err(|e| e.to_string())?;
    let oracle = Matrix::from_fn(256, d, |o, c| {
        let (oi, oj) = (o / 16, o % 16);
        let mut s = 0.0;
        for di in 0..4 {
            for dj in 0..4 {
                s += grid.get((oi * 4 + di) * g + oj * 4 + dj, c);
            }
        }
        s / 16.0
    });
    ensure!(pooled == oracle, "pooling differs from blockwise mean by {:e}", pooled.max_abs_diff(&oracle));
    let mean = |m: &Matrix| m.data().iter().sum::<f64>() / m.data().len() as f64;
    let drift = (mean(&pooled) - mean(&grid)).abs();
    ensure!(drift < 1e-12, "global mean drift {drift:e}");
    Ok(format!("1000 plans, pooling exact, mean drift {drift:.1e}"))
}

/// Replays the corpus continuation of the first occurrence of the prefix.
struct Replay(Vec<Vec<u32>>);

impl Continuation for Replay {
    fn continue_prefix(&self, prefix: &[u32], n: usize) -> gemma_mini::Result<Vec<u32>> {
        for d in &self.0 {
            if let Some(p) = d.windows(prefix.len()).position(|w| w == prefix) {
                return Ok(d[p + prefix.len()..p + prefix.len() + n].to_vec());
            }
        }
        Err(gemma_mini::Error::Shape("prefix not in corpus".into()))
    }
}

fn audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let a: Vec<u32> = (0..rng.gen_range(0..60)).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<u32> = (0..rng.gen_range(0..60)).map(|_| rng.gen_range(0..5)).collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            for j in 0..=b.len() {
                d[i][j] = match (i, j) {
                    (0, j) => j,
                    (i, 0) => i,
                    _ => (d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1])).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1),
                };
            }
        }
        ensure!(levenshtein(&a, &b) == d[a.len()][b.len()], "edit distance mismatch on {a:?} / {b:?}");
    }
    let truth: Vec<u32> = (0..50).collect();
    let mut g = truth.clone();
    for i in 0..5 {
        g[i * 9] = 1000;
    }
    let five = classify(&g, &truth).map_err(|e| e.to_string())?.0;
    g[49] = 1000;
    let six = classify(&g, &truth).map_err(|e| e.to_string())?.0;
    ensure!(five == Memorization::Approximate && six == Memorization::None, "5 edits {five:?}, 6 edits {six:?}");

    let texts = [
        "Sphinx of black quartz, judge my vow. The five boxing wizards jump quickly. Amazingly few discotheques provide jukeboxes. How razorback-jumping frogs can level six piqued gymnasts! Cozy lummox gives smart squid who asks for job pen.",
        "Jackdaws love my big sphinx of quartz. We promptly judged antique ivory buckles for the next prize. Crazy Fredrick bought many very exquisite opal jewels. Sixty zippers were quickly picked from the woven jute bag by the clerk.",
    ];
    let docs: Vec<Vec<u32>> = texts.iter().map(|t| tokenize(t, false)).collect();
    let corpus: Vec<(String, Vec<u32>)> = docs.iter().enumerate().map(|(i, d)| (format!("doc{i}"), d.clone())).collect();
    let samples = make_samples(&corpus, 10, 0).map_err(|e| e.to_string())?;
    let perfect = run_audit(&Replay(docs.clone()), &samples).map_err(|e| e.to_string())?;
    ensure!(perfect.exact_rate == 1.0, "memorizer exact_rate {}", perfect.exact_rate);

    let mut model = Model::init(ModelConfig::tiny(2, 1, 256), 0).unwrap();
    let opts = TrainOptions { steps: 1000, lr: 1e-2, seq_len: 100, seed: 0, linear_decay: true };
    let mut rates = vec![run_audit(&model, &samples).map_err(|e| e.to_string())?.exact_rate];
    let mut failure = None;
    train_lm(&mut model, &docs, &opts, |step, _, m| {
        if (step + 1) % 250 == 0 {
            match run_audit(m, &samples) {
                Ok(r) => rates.push(r.exact_rate),
                Err(e) => failure = Some(e.to_string()),
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = failure {
        return Err(e);
    }
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.2}")).collect();
    ensure!(rates.windows(2).all(|w| w[0] <= w[1]), "exact_rate not monotone: {shown:?}");
    ensure!(rates.last() > rates.first(), "exact_rate never rose: {shown:?}");
    Ok(format!("{} samples, checkpoint exact_rate {}", samples.len(), shown.join(" ")))
}

fn chat_format() -> Outcome {
    let turns = [
        ChatTurn::user("Who are you?"),
        ChatTurn::model("My name is Gemma!"),
        ChatTurn::user("What is 2+2?"),
    ];
    let text = format_chat(&turns).map_err(|e| e.to_string())?;
    let want = "<start_of_turn>user\nWho are you?<end_of_turn>\n\
<start_of_turn>model\nMy name is Gemma!<end_of_turn>\n\
<start_of_turn>user\nWhat is 2+2?<end_of_turn>\n\
<start_of_turn>model\n";
    ensure!(text == want, "template mismatch:\n{text}");
    let ids = tokenize(&text, true);
    ensure!(ids[0] == BOS_ID && ids.iter().filter(|&&t| t == BOS_ID).count() == 1, "BOS not injected exactly once");
    ensure!(ids[1] == START_OF_TURN_ID, "second token {}", ids[1]);
    ensure!(ids.iter().filter(|&&t| t == END_OF_TURN_ID).count() == 3, "end-of-turn count");
    let literal = tokenize(&format!("[BOS]{text}"), false);
    ensure!(!literal.contains(&BOS_ID), "literal [BOS] text became the BOS id");
    ensure!(!tokenize(&text, false).contains(&BOS_ID), "BOS without the flag");
    Ok(format!("{} bytes, {} ids with BOS", text.len(), ids.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("bf16 weight column", bf16_column),
        ("KV deltas scheme-independent", kv_deltas),
        ("KV ratio vs global-only", kv_ratio),
        ("5:1 interleaving pattern", interleaving),
        ("sliding-window equivalence", sliding_window),
        ("RoPE rescaling", rope_rescaling),
        ("GQA replication oracle", gqa_oracle),
        ("sampled-logit distillation", distillation),
        ("toy training sanity", toy_training),
        ("Pan & Scan", pan_and_scan),
        ("memorization audit", audit),
        ("chat formatting", chat_format),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
