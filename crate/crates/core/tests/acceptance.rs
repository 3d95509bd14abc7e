//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::cell::OnceCell;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lyra_core::autodiff::{dropout_mask, grad_check_store, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};
use lyra_core::corpus::{ArtistId, EncodedLine, Vocabulary, BOS, EOS, SPECIAL_TOKENS};
use lyra_core::dsp::{
    grouped_split, hann_window, hz_to_mel, mel_power, mel_spectrogram, stft_power, AudioClip, SongId, SpectrogramParams,
};
use lyra_core::eval::{aggregate_runs, cohens_kappa, token_purity, uniqueness, verbatim_copy_rate, TextCnn, TextCnnConfig};
use lyra_core::fixtures::{artist_vocabulary_set, fixture_config, write_fixture, FIXTURE_LINES, FIXTURE_WORDS};
use lyra_core::ngram::{diag_argmin_count, fit_kn, KneserNeyModel, NllMatrix};
use lyra_core::nn::{seeded, LstmCell};
use lyra_core::pipeline::{Evaluation, Pipeline};
use lyra_core::spectro::{ArtistEmbeddingMatrix, EmbeddingProvenance, SpectroCnn, SpectroCnnConfig};
use lyra_core::vae::{kl_divergence, kl_weight, standard_normal, train_vae, word_dropout, AnnealSchedule, ConditioningMode};
use lyra_core::{EvalReport, RunConfig, RunManifest, VaeCheckpoint, VaeConfig, VaeModel};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn project(g: &mut Graph, y: Var, seed: u64) -> lyra_core::Result<Var> {
    let n = g.value(y).len();
    let mut rng = seeded(seed);
    let w = g.constant(Tensor::uniform(&[n], 1.0, &mut rng).reshape(g.shape(y))?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_store(
    worst: &mut (f64, String),
    name: &str,
    store: &ParamStore,
    f: impl Fn(&mut Graph) -> lyra_core::Result<Var>,
) -> Result<(), String> {
    let report: GradCheckReport = ok(grad_check_store(store, f, GradCheckOptions::default()))?;
    if report.max_rel_error > worst.0 {
        *worst = (report.max_rel_error, name.to_string());
    }
    ensure(report.max_rel_error < 1e-4, || format!("{name}: {report:?}"))
}

fn check_op(
    worst: &mut (f64, String),
    name: &str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> lyra_core::Result<Var>,
) -> Result<(), String> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| store.insert(format!("in{i}"), x))
        .collect();
    check_store(worst, name, &store, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = f(g, &vars)?;
        if g.shape(y).is_empty() {
            Ok(y)
        } else {
            project(g, y, 99)
        }
    })
}

fn vocab_with(words: usize) -> Vocabulary {
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((0..words).map(|i| format!("w{i}")))
        .collect();
    Vocabulary::from_tokens(tokens, 1).unwrap()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let w = &mut worst;
    let mut rng = seeded(2024);
    let random = |shape: &[usize], r: &mut lyra_core::nn::SeededRng| Tensor::uniform(shape, 1.0, r);
    for _ in 0..3 {
        let m = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let r = &mut rng;
        check_op(w, "add", vec![random(&[m, n], r), random(&[m, n], r)], |g, v| g.add(v[0], v[1]))?;
        check_op(w, "sub", vec![random(&[m, n], r), random(&[m, n], r)], |g, v| g.sub(v[0], v[1]))?;
        check_op(w, "mul", vec![random(&[m, n], r), random(&[m, n], r)], |g, v| g.mul(v[0], v[1]))?;
        check_op(w, "add_row", vec![random(&[m, n], r), random(&[n], r)], |g, v| g.add_row(v[0], v[1]))?;
        check_op(w, "scale", vec![random(&[m, n], r)], |g, v| g.scale(v[0], -1.7))?;
        check_op(w, "matmul", vec![random(&[m, k], r), random(&[k, n], r)], |g, v| g.matmul(v[0], v[1]))?;
        check_op(w, "concat", vec![random(&[m, n], r), random(&[m, k], r)], |g, v| g.concat(&[v[0], v[1]]))?;
        check_op(w, "slice_last", vec![random(&[m, n + 2], r)], |g, v| g.slice_last(v[0], 1, n))?;
        check_op(w, "reshape", vec![random(&[m, n], r)], |g, v| g.reshape(v[0], &[n, m]))?;
        check_op(w, "sigmoid", vec![random(&[m, n], r)], |g, v| g.sigmoid(v[0]))?;
        check_op(w, "tanh", vec![random(&[m, n], r)], |g, v| g.tanh(v[0]))?;
        check_op(w, "relu", vec![random(&[m, n], r)], |g, v| g.relu(v[0]))?;
        check_op(w, "exp", vec![random(&[m, n], r)], |g, v| g.exp(v[0]))?;
        check_op(w, "sum", vec![random(&[m, n], r)], |g, v| g.sum(v[0]))?;
        check_op(w, "mean", vec![random(&[m, n], r)], |g, v| g.mean(v[0]))?;
        let ids: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..m)).collect();
        check_op(w, "embedding", vec![random(&[m, n], r)], |g, v| g.embedding(v[0], &ids))?;
        let mask = dropout_mask(m * n, 0.5, r);
        check_op(w, "dropout", vec![random(&[m, n], r)], |g, v| g.dropout(v[0], mask.clone()))?;
        let (h, wd) = (r.random_range(3..7), r.random_range(3..7));
        let (c, f) = (r.random_range(1..3), r.random_range(1..3));
        check_op(
            w,
            "conv2d",
            vec![random(&[2, c, h, wd], r), random(&[f, c, 3, 2], r), random(&[f], r)],
            |g, v| g.conv2d(v[0], v[1], v[2]),
        )?;
        check_op(w, "max_pool2d", vec![random(&[2, c, h, wd], r)], |g, v| g.max_pool2d(v[0]))?;
        check_op(w, "max_last", vec![random(&[m, n + 1], r)], |g, v| g.max_last(v[0]))?;
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
        check_op(w, "softmax_cross_entropy", vec![random(&[m, n], r)], |g, v| {
            g.softmax_cross_entropy(v[0], &labels)
        })?;
        let weights: Vec<f64> = (0..m).map(|i| if i % 2 == 0 { 0.7 } else { 0.0 }).collect();
        check_op(w, "weighted_cross_entropy", vec![random(&[m, n], r)], |g, v| {
            g.weighted_cross_entropy(v[0], &labels, &weights)
        })?;
    }

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
    let xs: Vec<ParamId> = (0..3)
        .map(|t| store.insert(format!("x{t}"), Tensor::uniform(&[2, 3], 1.0, &mut rng)))
        .collect();
    let h0 = store.insert("h0", Tensor::uniform(&[2, 4], 0.5, &mut rng));
    let c0 = store.insert("c0", Tensor::uniform(&[2, 4], 0.5, &mut rng));
    check_store(w, "lstm_cell", &store, |g| {
        let (mut h, mut c) = (g.param(h0), g.param(c0));
        for &x in &xs {
            let xv = g.param(x);
            (h, c) = cell.step(g, xv, h, c)?;
        }
        project(g, h, 3)
    })?;

    let spectro_config = SpectroCnnConfig {
        conv_channels: vec![2],
        head: vec![8, 50],
        ..SpectroCnnConfig::default()
    };
    let cnn = ok(SpectroCnn::new(spectro_config, (8, 8), 2, 4))?;
    let pixels = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut rng);
    check_store(w, "spectro_cnn", &cnn.store, |g| {
        let x = g.constant(pixels.clone());
        let (logits, _) = cnn.forward(g, x, None)?;
        g.softmax_cross_entropy(logits, &[0, 1])
    })?;

    let text_config = TextCnnConfig {
        filter_widths: vec![2, 3],
        feature_maps: 3,
        embedding_dim: 4,
        max_len: 5,
        ..TextCnnConfig::default()
    };
    let text = ok(TextCnn::new(text_config, vocab_with(6), 3, 8))?;
    let batch = vec![vec![4, 5, 6, 0, 0], vec![9, 8, 7, 6, 5]];
    check_store(w, "text_cnn", &text.store, |g| {
        let logits = text.forward(g, &batch, None)?;
        g.softmax_cross_entropy(logits, &[2, 0])
    })?;

    let line = EncodedLine {
        ids: vec![BOS, 4, 5, 6, EOS],
        artist: ArtistId(1),
        length: 3,
    };
    let audio = ArtistEmbeddingMatrix::new(Tensor::normal(&[2, 4], 0.5, &mut seeded(77)), EmbeddingProvenance::Audio)
        .map_err(|e| e.to_string())?;
    for mode in ConditioningMode::ALL {
        let config = VaeConfig {
            word_emb_dim: 5,
            encoder_hidden: 4,
            latent_dim: 4,
            decoder_hidden: 6,
            artist_emb_dim: 4,
            mode,
            ..VaeConfig::default()
        };
        let mut model = ok(VaeModel::new(config, vocab_with(8), 2, Some(&audio), 1))?;
        let mut r = seeded(1);
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            for v in model.store.get_mut(id).data_mut() {
                *v = 0.5 * standard_normal(1, &mut r)[0];
            }
        }
        let eps = standard_normal(4, &mut r);
        let inputs = vec![word_dropout(&[BOS, 4, 5, 6], 0.5, &mut r)];
        let batch = [&line];
        check_store(w, &format!("vae[{mode}]"), &model.store, |g| {
            Ok(model.loss_with_noise(g, &batch, 0.7, &eps, &inputs)?.total)
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {}", secs(elapsed)))?;
    Ok(format!("max rel error {:.2e} ({}) in {}", worst.0, worst.1, secs(elapsed)))
}

// ---------------------------------------------------------------- KL

fn kl_correctness() -> Outcome {
    let mut rng = seeded(31);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = kl_divergence(&mu, &lv);
        // E_q[log q(z) − log p(z)] per dimension, summed
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut s = 0.0;
            for d in 0..8 {
                let e: f64 = rng.sample(StandardNormal);
                let sd = (0.5 * lv[d]).exp();
                let z = mu[d] + sd * e;
                s += -0.5 * lv[d] - 0.5 * e * e + 0.5 * z * z;
            }
            acc += s;
        }
        let mc = acc / n as f64;
        let rel = (mc - exact).abs() / exact;
        worst = worst.max(rel);
        ensure(rel < 0.01, || format!("closed form {exact} vs Monte Carlo {mc}"))?;
    }
    ensure(kl_divergence(&[0.0; 8], &[0.0; 8]) == 0.0, || "kl(0,0) != 0".into())?;
    for _ in 0..1000 {
        let d = rng.random_range(1..10);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let k = kl_divergence(&mu, &lv);
        ensure(k >= 0.0, || format!("negative KL {k} for {mu:?} {lv:?}"))?;
    }
    Ok(format!("worst Monte Carlo deviation {:.3}%", 100.0 * worst))
}

fn kl_annealing() -> Outcome {
    let s = AnnealSchedule::default();
    ensure(kl_weight(0, &s) == 0.0, || "weight(0) != 0".into())?;
    ensure(kl_weight(3000, &s) == 1.0, || "weight(3000) != 1".into())?;
    ensure(kl_weight(1500, &s) == 0.5, || "weight(1500) != 0.5".into())?;
    for step in 1..=4000 {
        let (a, b) = (kl_weight(step - 1, &s), kl_weight(step, &s));
        ensure(b >= a, || format!("weight decreases at step {step}: {a} -> {b}"))?;
    }
    Ok("0, 0.5, 1 at 0, 1500, 3000; monotone over 0..=4000".into())
}

// ---------------------------------------------------------------- Kneser-Ney

/// Brute-force interpolated Kneser-Ney recomputed from the raw trigram windows.
struct KnOracle {
    windows: Vec<[String; 3]>,
    predictable: Vec<String>,
    d: f64,
}

impl KnOracle {
    fn new(lines: &[Vec<String>]) -> Self {
        let mut windows = Vec::new();
        let mut types = BTreeSet::new();
        for line in lines.iter().filter(|l| !l.is_empty()) {
            let mut seq = vec!["<s>".to_string(), "<s>".to_string()];
            seq.extend(line.iter().cloned());
            seq.push("</s>".into());
            types.extend(line.iter().cloned());
            for w in seq.windows(3) {
                windows.push([w[0].clone(), w[1].clone(), w[2].clone()]);
            }
        }
        types.insert("<unk>".into());
        types.insert("</s>".into());
        KnOracle {
            windows,
            predictable: types.into_iter().collect(),
            d: 0.75,
        }
    }

    /// Distinct `(v, w)` pairs among the windows.
    fn pairs(&self) -> BTreeSet<(&str, &str)> {
        self.windows.iter().map(|t| (t[1].as_str(), t[2].as_str())).collect()
    }

    fn n1_dot_w(&self, w: &str) -> usize {
        self.pairs().iter().filter(|p| p.1 == w).count()
    }

    fn n1_dot_vw(&self, v: &str, w: &str) -> usize {
        self.windows
            .iter()
            .filter(|t| t[1] == v && t[2] == w)
            .map(|t| t[0].as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    fn p1(&self, w: &str) -> f64 {
        let all = self.pairs().len() as f64;
        let seen = self.predictable.iter().filter(|x| self.n1_dot_w(x) > 0).count() as f64;
        (self.n1_dot_w(w) as f64 - self.d).max(0.0) / all + self.d * seen / all / self.predictable.len() as f64
    }

    fn p2(&self, v: &str, w: &str) -> f64 {
        let followers: BTreeSet<&str> = self.windows.iter().filter(|t| t[1] == v).map(|t| t[2].as_str()).collect();
        let total: usize = followers.iter().map(|x| self.n1_dot_vw(v, x)).sum();
        if total == 0 {
            return self.p1(w);
        }
        let total = total as f64;
        (self.n1_dot_vw(v, w) as f64 - self.d).max(0.0) / total + self.d * followers.len() as f64 / total * self.p1(w)
    }

    fn p3(&self, u: &str, v: &str, w: &str) -> f64 {
        let ctx: Vec<&[String; 3]> = self.windows.iter().filter(|t| t[0] == u && t[1] == v).collect();
        if ctx.is_empty() {
            return self.p2(v, w);
        }
        let total = ctx.len() as f64;
        let c = ctx.iter().filter(|t| t[2] == w).count() as f64;
        let types = ctx.iter().map(|t| t[2].as_str()).collect::<BTreeSet<_>>().len() as f64;
        (c - self.d).max(0.0) / total + self.d * types / total * self.p2(v, w)
    }
}

fn compare_kn(lines: &[Vec<String>], worst: &mut (f64, f64)) -> Result<(), String> {
    let model: KneserNeyModel = ok(fit_kn(lines))?;
    let oracle = KnOracle::new(lines);
    let fitted: BTreeSet<&str> = model.vocabulary().collect();
    let expected: BTreeSet<&str> = oracle.predictable.iter().map(String::as_str).collect();
    ensure(fitted == expected, || format!("predictable set {fitted:?} vs {expected:?}"))?;
    let contexts: Vec<&str> = std::iter::once("<s>").chain(expected.iter().copied()).collect();
    for &u in &contexts {
        for &v in &contexts {
            let mut total = 0.0;
            for &w in &expected {
                let (a, b) = (model.prob(u, v, w), oracle.p3(u, v, w));
                worst.0 = worst.0.max((a - b).abs());
                ensure((a - b).abs() <= 1e-12, || format!("P({w}|{u},{v}) = {a}, oracle {b} on {lines:?}"))?;
                total += a;
            }
            worst.1 = worst.1.max((total - 1.0).abs());
            ensure((total - 1.0).abs() <= 1e-9, || format!("Σ P(·|{u},{v}) = {total} on {lines:?}"))?;
        }
    }
    Ok(())
}

fn kn_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, 0.0);
    let mut corpora = 0;
    // every corpus of one or two lines of length ≤ 2 over {a, b}
    let mut short = Vec::new();
    for len in 1..=2 {
        for code in 0..(1 << len) {
            short.push((0..len).map(|i| if code >> i & 1 == 1 { "b" } else { "a" }.to_string()).collect::<Vec<_>>());
        }
    }
    for a in &short {
        compare_kn(&[a.clone()], &mut worst)?;
        corpora += 1;
        for b in &short {
            compare_kn(&[a.clone(), b.clone()], &mut worst)?;
            corpora += 1;
        }
    }
    let mut rng = seeded(5);
    let names = ["a", "b", "c", "d", "e"];
    for _ in 0..300 {
        let vocab = rng.random_range(1..=5);
        let lines: Vec<Vec<String>> = (0..rng.random_range(1..=20))
            .map(|_| (0..rng.random_range(1..=8)).map(|_| names[rng.random_range(0..vocab)].to_string()).collect())
            .collect();
        compare_kn(&lines, &mut worst)?;
        corpora += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "{corpora} corpora, max |Δ| {:.1e}, max |Σ−1| {:.1e}, {}",
        worst.0,
        worst.1,
        secs(elapsed)
    ))
}

fn nll_matrix_structure() -> Outcome {
    let rows = [
        [15.5, 15.95, 16.19, 16.04, 16.29, 16.43, 15.81],
        [16.38, 15.08, 15.89, 16.36, 16.38, 16.31, 16.36],
        [16.47, 16.01, 15.16, 16.66, 16.47, 16.61, 16.37],
        [17.09, 16.86, 16.78, 16.32, 17.07, 17.07, 16.88],
        [17.74, 17.3, 16.92, 17.77, 16.95, 17.67, 17.35],
        [17.49, 17.04, 17.07, 17.13, 17.63, 16.7, 17.28],
        [17.07, 17.23, 17.15, 17.27, 17.22, 17.24, 16.37],
    ];
    let names: Vec<String> = ["AR", "E", "I", "CR", "A", "HR", "PR"].map(String::from).to_vec();
    let m = ok(NllMatrix::new(names.clone(), rows.iter().map(|r| r.to_vec()).collect()))?;
    let count = diag_argmin_count(&m);
    ensure(count == 6, || format!("diag_argmin_count = {count}"))?;
    let failing: Vec<&str> = (0..7)
        .filter(|&i| (0..7).any(|j| m.values[i][j] < m.values[i][i]))
        .map(|i| names[i].as_str())
        .collect();
    ensure(failing == ["A"], || format!("failing rows {failing:?}"))?;
    ensure(m.values[4][2] == 16.92 && m.values[4][4] == 16.95, || "unexpected Alternative row".into())?;
    Ok("6/7 diagonal minima; Alternative row fails (16.92 < 16.95)".into())
}

// ---------------------------------------------------------------- VAE on the fixture

fn fixture_pipeline(root: &Path, config: RunConfig) -> Result<Pipeline, String> {
    ok(write_fixture(&root.join("corpus"), 0))?;
    ok(Pipeline::new(config, root))
}

fn conditioning_fidelity() -> Outcome {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let p = fixture_pipeline(dir.path(), fixture_config(1, 5000))?;
    let corpus = ok(p.corpus())?;
    for a in &corpus.artists {
        let lines = corpus.lines_of(a.id).count();
        let vocab: HashSet<String> = corpus.lines_of(a.id).flat_map(|l| l.tokens.iter().cloned()).collect();
        ensure(lines == FIXTURE_LINES && vocab.len() == FIXTURE_WORDS, || {
            format!("{}: {lines} lines, {} types", a.name, vocab.len())
        })?;
    }
    ok(p.prep_audio())?;
    ok(p.train_spectro())?;
    for mode in ConditioningMode::ALL {
        ok(p.train_vae(mode))?;
    }
    let ev: Evaluation = ok(p.evaluate())?;
    let mut summary = Vec::new();
    for mode in ConditioningMode::ALL {
        let m = ev.aggregate.model(mode).ok_or_else(|| format!("{mode} missing from report"))?;
        let (_, _, generated) = ev.generated.iter().find(|g| g.0 == mode).ok_or("no generated lines")?;
        let mut purities = Vec::new();
        for (a, lines) in generated.iter().enumerate() {
            purities.push(ok(token_purity(lines, &artist_vocabulary_set(a)))?);
        }
        let min_purity = purities.iter().copied().fold(1.0, f64::min);
        ensure(min_purity >= 0.9, || format!("{mode}: purity {purities:?}"))?;
        ensure(m.style_accuracy >= 0.9, || format!("{mode}: style accuracy {}", m.style_accuracy))?;
        ensure(m.diag_argmin_count == 2.0, || format!("{mode}: diag {}", m.diag_argmin_count))?;
        summary.push(format!("{mode} {min_purity:.2}/{:.2}/2", m.style_accuracy));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {}", secs(elapsed)))?;
    Ok(format!("purity/style/diag {} in {}", summary.join(", "), secs(elapsed)))
}

fn training_progress() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let p = fixture_pipeline(dir.path(), fixture_config(1, 2000))?;
    let corpus = ok(p.corpus())?;
    let (vocab, lines) = ok(p.training_data(&corpus))?;
    let config = VaeConfig {
        mode: ConditioningMode::OneHot,
        ..p.config.vae.clone()
    };
    let mut model = ok(VaeModel::new(config, vocab, corpus.artists.len(), None, 1))?;
    let before = ok(model.reconstruction_nll(&lines))?;
    let history = ok(train_vae(&mut model, &lines, 1))?;
    let after = ok(model.reconstruction_nll(&lines))?;
    let first = &history.steps[0];
    ensure(history.steps.len() == 2000, || format!("{} steps", history.steps.len()))?;
    ensure(first.total == first.recon, || format!("step 0 total {} vs recon {}", first.total, first.recon))?;
    ensure(after < 0.5 * before, || format!("per-token NLL {before:.3} -> {after:.3}"))?;
    Ok(format!("per-token NLL {before:.3} -> {after:.3} ({:.0}%)", 100.0 * after / before))
}

fn frozen_contract() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let p = fixture_pipeline(dir.path(), fixture_config(1, 100))?;
    let corpus = ok(p.corpus())?;
    let (vocab, lines) = ok(p.training_data(&corpus))?;
    let artists = corpus.artists.len();
    let audio = ok(ArtistEmbeddingMatrix::new(
        Tensor::normal(&[artists, p.config.vae.artist_emb_dim], 1.0, &mut seeded(3)),
        EmbeddingProvenance::Audio,
    ))?;
    let mut detail = Vec::new();
    for mode in [
        ConditioningMode::AudioFrozen,
        ConditioningMode::RandomFrozen,
        ConditioningMode::AudioTrainable,
        ConditioningMode::RandomTrainable,
    ] {
        let config = VaeConfig {
            mode,
            steps: 100,
            ..p.config.vae.clone()
        };
        let mut model = ok(VaeModel::new(config, vocab.clone(), artists, Some(&audio), 2))?;
        let before: Vec<u64> = model.artist_embeddings().data().iter().map(|v| v.to_bits()).collect();
        ok(train_vae(&mut model, &lines, 2))?;
        let after: Vec<u64> = model.artist_embeddings().data().iter().map(|v| v.to_bits()).collect();
        let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        if mode.is_trainable() {
            ensure(changed > 0, || format!("{mode}: embeddings unchanged"))?;
        } else {
            ensure(changed == 0, || format!("{mode}: {changed} entries changed"))?;
        }
        detail.push(format!("{mode} {changed}/{} changed", before.len()));
    }
    Ok(detail.join(", "))
}

// ---------------------------------------------------------------- DSP

fn dsp_correctness() -> Outcome {
    let mut rng = seeded(9);
    let signal: Vec<f64> = (0..1500).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (n_fft, hop) = (256, 100);
    let power = ok(stft_power(&signal, n_fft, hop))?;
    let window = hann_window(n_fft);
    let mut worst: f64 = 0.0;
    for f in 0..power.rows {
        let frame: Vec<f64> = (0..n_fft).map(|i| signal[f * hop + i] * window[i]).collect();
        let direct: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, x) in frame.iter().enumerate() {
                    let phase = -2.0 * std::f64::consts::PI * (k * i) as f64 / n_fft as f64;
                    re += x * phase.cos();
                    im += x * phase.sin();
                }
                re * re + im * im
            })
            .collect();
        let peak = direct.iter().copied().fold(0.0, f64::max);
        for (a, b) in power.row(f).iter().zip(&direct) {
            worst = worst.max((a - b).abs() / peak);
        }
    }
    ensure(worst <= 1e-6, || format!("STFT deviates by {worst:e} of the frame peak"))?;

    let mel = hz_to_mel(700.0);
    let expected = 2595.0 * 2f64.log10();
    ensure((mel - expected).abs() <= 1e-9, || format!("mel(700) = {mel}, expected {expected}"))?;

    let sr = 22050;
    let params = SpectrogramParams::default();
    let sine: Vec<f64> = (0..2 * sr)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
        .collect();
    let mp = ok(mel_power(&sine, sr as u32, &params))?;
    let band = ok(params.filterbank(sr as u32))?.band_of(440.0);
    let total: f64 = mp.data.iter().sum();
    let near: f64 = (band.saturating_sub(2)..=(band + 2).min(mp.rows - 1))
        .map(|r| mp.row(r).iter().sum::<f64>())
        .sum();
    let share = near / total;
    ensure(share >= 0.9, || format!("440 Hz share within ±2 bins of band {band}: {share:.3}"))?;

    let clip = AudioClip {
        samples: vec![0.0; 10 * sr],
        sample_rate: sr as u32,
        song_id: SongId("silence".into()),
        artist: ArtistId(0),
        clip_index: 0,
    };
    let s = ok(mel_spectrogram(&clip, &params))?;
    ensure(s.values.data.iter().all(|&v| v == -80.0), || "silence is not uniformly -80 dB".into())?;
    Ok(format!("STFT {worst:.1e} of peak; 440 Hz share {share:.3}; silence uniform -80 dB"))
}

fn spectro_fixture() -> Outcome {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let p = fixture_pipeline(dir.path(), fixture_config(1, 10))?;
    ok(p.prep_audio())?;
    let (summary, _) = ok(p.train_spectro())?;
    let elapsed = start.elapsed();
    let acc = summary.report.test_accuracy;
    ensure(acc >= 0.95, || format!("test accuracy {acc}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {}", secs(elapsed)))?;

    let spectrograms = ok(p.load_spectrograms())?;
    let split = ok(grouped_split(&spectrograms, p.config.audio.split, p.config.audio.split_seed))?;
    let ids = |part: &[lyra_core::dsp::Spectrogram]| part.iter().map(|s| s.song_id.clone()).collect::<BTreeSet<SongId>>();
    let parts = [ids(&split.train), ids(&split.valid), ids(&split.test)];
    let mut crossings = 0;
    for s in &spectrograms {
        let homes = parts.iter().filter(|p| p.contains(&s.song_id)).count();
        if homes != 1 {
            crossings += 1;
        }
    }
    ensure(crossings == 0 && summary.crossing_songs.is_empty(), || format!("{crossings} clips in several partitions"))?;
    ensure(split.train.len() + split.valid.len() + split.test.len() == spectrograms.len(), || "split drops clips".into())?;
    Ok(format!(
        "test accuracy {acc:.3}, partitions {:?}, 0 crossing songs, {}",
        summary.partition_sizes,
        secs(elapsed)
    ))
}

// ---------------------------------------------------------------- metrics

fn metrics_exactness() -> Outcome {
    let distinct: Vec<String> = (0..50).map(|i| format!("line {i}")).collect();
    let u = ok(uniqueness(&distinct))?;
    ensure(u == 1.0, || format!("all distinct: {u}"))?;
    let same = vec!["the same line"; 7];
    let u = ok(uniqueness(&same))?;
    ensure(u == 1.0 / 7.0, || format!("all equal: {u}"))?;
    let u = ok(uniqueness(&["a b", "A  b", "c"]))?;
    ensure(u == 2.0 / 3.0, || format!("normalized duplicate: {u}"))?;

    let training: Vec<String> = (0..30).map(|i| format!("training line {i}")).collect();
    let mut generated: Vec<String> = (0..98).map(|i| format!("novel line {i}")).collect();
    generated.push("training line 4".into());
    generated.push("Training Line 17".into());
    let copy = ok(verbatim_copy_rate(&generated, &training))?;
    ensure(copy == 0.02, || format!("copy rate {copy}"))?;

    let k0 = ok(cohens_kappa(&[true, true, false, false], &[true, false, true, false]))?;
    ensure(k0 == 0.0, || format!("kappa {k0}, expected 0"))?;
    let k5 = ok(cohens_kappa(&[true, true, true, false], &[true, true, false, false]))?;
    ensure(k5 == 0.5, || format!("kappa {k5}, expected 0.5"))?;
    Ok("uniqueness 1, 1/7, 2/3; copy rate 0.02; kappa 0.0 and 0.5".into())
}

// ---------------------------------------------------------------- determinism and aggregation

struct FullRun {
    _dir: tempfile::TempDir,
    root: PathBuf,
    evaluation: Evaluation,
}

fn full_run(config: RunConfig) -> Result<FullRun, String> {
    let dir = ok(tempfile::tempdir())?;
    let root = dir.path().to_path_buf();
    let p = fixture_pipeline(&root, config)?;
    ok(p.prep_audio())?;
    ok(p.train_spectro())?;
    for &mode in &p.config.evaluation.modes {
        ok(p.train_vae(mode))?;
    }
    let evaluation = ok(p.evaluate())?;
    Ok(FullRun {
        _dir: dir,
        root,
        evaluation,
    })
}

fn output_files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in ok(std::fs::read_dir(&d))? {
            let path = ok(entry)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, ok(std::fs::read(&path))?);
            }
        }
    }
    Ok(out)
}

fn determinism(first: &FullRun) -> Outcome {
    let out1 = first.root.join("runs");
    let manifest = ok(RunManifest::load(&out1.join("manifest-evaluate.json")))?;
    let second = full_run(manifest.config.clone())?;
    let out2 = second.root.join("runs");
    let (a, b) = (output_files(&out1)?, output_files(&out2)?);
    ensure(a.keys().eq(b.keys()), || format!("file sets differ: {:?} vs {:?}", a.keys(), b.keys()))?;
    let mut compared = 0;
    for (path, bytes) in &a {
        let name = path.file_name().unwrap().to_string_lossy();
        if name.starts_with("manifest-") {
            let m1 = ok(RunManifest::load(&out1.join(path)))?;
            let m2 = ok(RunManifest::load(&out2.join(path)))?;
            ensure(m1.outputs == m2.outputs && m1.config_hash == m2.config_hash, || {
                format!("{} records different outputs", path.display())
            })?;
        } else {
            ensure(bytes == &b[path], || format!("{} differs between runs", path.display()))?;
        }
        compared += 1;
    }

    let path = out1.join("checkpoints/vae-onehot-seed1.ckpt");
    let mut ckpt = ok(VaeCheckpoint::load(&path))?;
    ckpt.model.store.round_to_f32();
    let max_len = ckpt.model.config.max_decode_len;
    let lines = ok(lyra_core::vae::generate(&ckpt.model, ArtistId(1), 8, 0.0, max_len, 7))?;
    let tmp = ok(tempfile::tempdir())?;
    let (p1, p2) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    ok(ckpt.save(&p1))?;
    let loaded = ok(VaeCheckpoint::load(&p1))?;
    let again = ok(lyra_core::vae::generate(&loaded.model, ArtistId(1), 8, 0.0, max_len, 7))?;
    ensure(lines == again, || format!("{lines:?} vs {again:?}"))?;
    ok(loaded.save(&p2))?;
    ensure(ok(std::fs::read(&p1))? == ok(std::fs::read(&p2))?, || "save→load→save changes bytes".into())?;
    Ok(format!("{compared} output files identical across runs; checkpoint round trip reproduces {} lines", lines.len()))
}

fn aggregation(run: &FullRun) -> Outcome {
    let runs: Vec<EvalReport> = ok(serde_json::from_str(&ok(std::fs::read_to_string(run.root.join("runs/eval_runs.json")))?))?;
    let agg = ok(EvalReport::from_json(&ok(std::fs::read_to_string(run.root.join("runs/eval_report.json")))?))?;
    ensure(runs == run.evaluation.runs && agg == run.evaluation.aggregate, || "reports on disk differ from memory".into())?;
    ensure(runs.len() == 5, || format!("{} runs", runs.len()))?;
    ensure(agg.seeds == [1, 2, 3, 4, 5], || format!("seeds {:?}", agg.seeds))?;
    ensure(agg.aggregation == "mean", || format!("aggregation {}", agg.aggregation))?;
    ensure(ok(aggregate_runs(&runs))? == agg, || "aggregate_runs disagrees with the stored report".into())?;

    let mut checked = 0;
    let mut check = |name: String, value: f64, per_run: Vec<f64>| -> Result<(), String> {
        let lo = per_run.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = per_run.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
        checked += 1;
        ensure(lo <= value && value <= hi, || format!("{name}: {value} outside [{lo}, {hi}]"))?;
        ensure((value - mean).abs() <= 1e-12 * mean.abs().max(1.0), || format!("{name}: {value} != mean {mean}"))
    };
    check("classifier".into(), agg.classifier_test_accuracy, runs.iter().map(|r| r.classifier_test_accuracy).collect())?;
    for (i, m) in agg.models.iter().enumerate() {
        let per = |f: &dyn Fn(&lyra_core::eval::ModelMetrics) -> f64| runs.iter().map(|r| f(&r.models[i])).collect();
        check(format!("{} style", m.mode), m.style_accuracy, per(&|x| x.style_accuracy))?;
        check(format!("{} diag", m.mode), m.diag_argmin_count, per(&|x| x.diag_argmin_count))?;
        check(format!("{} uniqueness", m.mode), m.uniqueness, per(&|x| x.uniqueness))?;
        check(format!("{} copy", m.mode), m.verbatim_copy_rate, per(&|x| x.verbatim_copy_rate))?;
        for r in 0..m.nll.size() {
            for c in 0..m.nll.size() {
                check(format!("{} nll[{r}][{c}]", m.mode), m.nll.values[r][c], per(&|x| x.nll.values[r][c]))?;
            }
        }
    }
    Ok(format!("{checked} aggregated values inside their 5-run envelopes"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let shared: OnceCell<Result<FullRun, String>> = OnceCell::new();
    let shared_run = || {
        shared
            .get_or_init(|| {
                let mut config = fixture_config(5, 300);
                config.evaluation.modes = ConditioningMode::ALL.to_vec();
                full_run(config)
            })
            .as_ref()
            .map_err(|e| format!("fixture run failed: {e}"))
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient_integrity", Box::new(gradient_integrity)),
        ("kl_correctness", Box::new(kl_correctness)),
        ("kl_annealing", Box::new(kl_annealing)),
        ("kneser_ney_oracle", Box::new(kn_oracle)),
        ("nll_matrix_structure", Box::new(nll_matrix_structure)),
        ("conditioning_fidelity", Box::new(conditioning_fidelity)),
        ("vae_training_progress", Box::new(training_progress)),
        ("frozen_mode_contract", Box::new(frozen_contract)),
        ("dsp_correctness", Box::new(dsp_correctness)),
        ("spectrogram_classifier", Box::new(spectro_fixture)),
        ("metrics_exactness", Box::new(metrics_exactness)),
        ("determinism_persistence", Box::new(|| determinism(shared_run()?))),
        ("aggregation", Box::new(|| aggregation(shared_run()?))),
    ];

    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
