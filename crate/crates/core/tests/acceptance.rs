//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use grouptie::corpus::{random_uniform_matrix, EmbeddingMatrix, Vocabulary};
use grouptie::eval::{accuracy, auc, run_experiment, summarize, ExperimentData, Metric, Protocol};
use grouptie::groups::{
    groups_from_brown, groups_from_mesh, groups_from_sentiment_lexicon, init_group_embeddings,
    GroupTable,
};
use grouptie::hashshare::HashSpec;
use grouptie::model::{
    checkpoint_bytes, checkpoint_from_bytes, Channel2, Channel2Mode, ModelConfig, Tables, Trainer,
};
use grouptie::nnet::{adadelta_update, AdadeltaState, ConvFilterBank};
use grouptie::seed;
use ndarray::{Array1, Array2};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_table(rng: &mut impl Rng, words: usize, groups: usize, p_grouped: f64) -> GroupTable {
    let mut members = vec![Vec::new(); groups];
    for i in 0..words {
        if rng.gen_bool(p_grouped) {
            for (k, m) in members.iter_mut().enumerate() {
                if rng.gen_bool(0.4) || k == i % groups {
                    m.push(i);
                }
            }
        }
    }
    for (k, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            m.push(k % words);
        }
        m.sort_unstable();
        m.dedup();
    }
    GroupTable::from_members(words, members).unwrap()
}

fn random_batch(rng: &mut impl Rng, words: usize, size: usize) -> Vec<(Vec<usize>, usize)> {
    (0..size)
        .map(|_| {
            let len = rng.gen_range(1..7);
            ((0..len).map(|_| rng.gen_range(0..=words)).collect(), rng.gen_range(0..2))
        })
        .collect()
}

fn as_batch(docs: &[(Vec<usize>, usize)]) -> Vec<(&[usize], usize)> {
    docs.iter().map(|(d, l)| (d.as_slice(), *l)).collect()
}

fn small_config(mode: Channel2Mode, seed: u64) -> ModelConfig {
    ModelConfig {
        filter_heights: vec![2],
        filters_per_height: 5,
        num_classes: 2,
        dropout_rate: 0.5,
        channel2_mode: mode,
        signing_enabled: true,
        seed,
        ..ModelConfig::default()
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Reference implementation of the shared channel: `shared = M · groups + private`,
/// with `M` the dense 0/±1 expansion matrix and `d_groups = Mᵀ · d_shared`.
struct TiedReference {
    expand: Array2<f64>,
    private: Vec<usize>,
    g: Array2<f64>,
    private_values: Array2<f64>,
    g_state: AdadeltaState,
    private_state: AdadeltaState,
    embed_p: Array2<f64>,
    embed_state: AdadeltaState,
    net: grouptie::model::Network,
    bank_states: Vec<(AdadeltaState, AdadeltaState)>,
    softmax_states: (AdadeltaState, AdadeltaState),
    config: ModelConfig,
    step: u64,
}

impl TiedReference {
    fn new(trainer: &Trainer, table: &GroupTable, spec: &HashSpec) -> Self {
        let shared = trainer.params.shared().expect("share mode");
        let rows = trainer.params.rows();
        let d = trainer.params.dim();
        let n = table.num_groups();
        let mut expand = Array2::zeros((rows * d, n * d));
        let mut private = Vec::new();
        for i in 0..rows {
            let gs = table.groups_of(i);
            if gs.is_empty() {
                private.push(i);
                continue;
            }
            for j in 0..d {
                let k = gs[spec.hash_dim(i, j, gs.len()).unwrap()];
                expand[[i * d + j, k * d + j]] = f64::from(spec.sign(i, j));
            }
        }
        let mut private_values = Array2::zeros((private.len(), d));
        for (p, &i) in private.iter().enumerate() {
            private_values.row_mut(p).assign(&shared.values().row(i));
        }
        let net = trainer.params.net.clone();
        let bank_states = net
            .conv_p
            .banks
            .iter()
            .chain(&net.conv_s.as_ref().unwrap().banks)
            .map(|b| (AdadeltaState::new(b.weights.len()), AdadeltaState::new(b.bias.len())))
            .collect();
        TiedReference {
            expand,
            g: shared.groups().values.clone(),
            g_state: AdadeltaState::new(n * d),
            private_state: AdadeltaState::new(private.len() * d),
            private_values,
            private,
            embed_p: trainer.params.embed_p.clone(),
            embed_state: AdadeltaState::new(rows * d),
            softmax_states: (
                AdadeltaState::new(net.softmax_w.len()),
                AdadeltaState::new(net.softmax_b.len()),
            ),
            bank_states,
            net,
            config: trainer.config.clone(),
            step: 0,
        }
    }

    fn shared_matrix(&self) -> Array2<f64> {
        let (rows, d) = self.embed_p.dim();
        let flat = self.expand.dot(&Array1::from_iter(self.g.iter().copied()));
        let mut es = Array2::from_shape_vec((rows, d), flat.to_vec()).unwrap();
        for (p, &i) in self.private.iter().enumerate() {
            es.row_mut(i).assign(&self.private_values.row(p));
        }
        es
    }

    fn step(&mut self, batch: &[(&[usize], usize)]) -> f64 {
        let es = self.shared_matrix();
        let tables = Tables {
            embed_p: &self.embed_p,
            embed_s: Some(&es),
        };
        let dropout = Some((
            self.config.dropout_rate,
            seed::derive(self.config.seed, "dropout", &[self.step]),
        ));
        let (loss, grads) = self.net.batch_loss_and_gradients(tables, batch, dropout).unwrap();
        let ges = grads.embed_s.unwrap();
        let flat = Array1::from_iter(ges.iter().copied());
        let gg = self.expand.t().dot(&flat);
        let gg = Array2::from_shape_vec(self.g.dim(), gg.to_vec()).unwrap();
        let cfg = self.config.adadelta;
        adadelta_update(&mut self.g, &gg, &mut self.g_state, &cfg).unwrap();
        let mut gp = Array2::zeros(self.private_values.dim());
        for (p, &i) in self.private.iter().enumerate() {
            gp.row_mut(p).assign(&ges.row(i));
        }
        adadelta_update(&mut self.private_values, &gp, &mut self.private_state, &cfg).unwrap();
        adadelta_update(&mut self.embed_p, &grads.embed_p, &mut self.embed_state, &cfg).unwrap();
        let conv_s = self.net.conv_s.as_mut().unwrap();
        let params = self.net.conv_p.banks.iter_mut().chain(conv_s.banks.iter_mut());
        let gbanks = grads.conv_p.banks.iter().chain(&grads.conv_s.as_ref().unwrap().banks);
        for ((p, g), (sw, sb)) in params.zip(gbanks).zip(&mut self.bank_states) {
            adadelta_update(&mut p.weights, &g.weights, sw, &cfg).unwrap();
            adadelta_update(&mut p.bias, &g.bias, sb, &cfg).unwrap();
        }
        adadelta_update(&mut self.net.softmax_w, &grads.softmax_w, &mut self.softmax_states.0, &cfg).unwrap();
        adadelta_update(&mut self.net.softmax_b, &grads.softmax_b, &mut self.softmax_states.1, &cfg).unwrap();
        self.step += 1;
        loss
    }
}

fn criterion_1() -> Outcome {
    let (v, d, n) = (20, 8, 4);
    let mut rng = common::rng(101);
    let table = random_table(&mut rng, v, n, 0.8);
    let pre = EmbeddingMatrix::new(random_uniform_matrix(v, d, 0.5, 7)).unwrap();
    let config = small_config(Channel2Mode::GroupInitShare, 17);
    let spec = config.hash_spec();
    let mut trainer = Trainer::new(config, &pre, Some(&table)).unwrap();
    let ext = table.clone().with_num_words(v + 1).unwrap();
    let mut reference = TiedReference::new(&trainer, &ext, &spec);
    check(
        max_abs_diff(&reference.shared_matrix(), trainer.params.shared().unwrap().values()) < 1e-15,
        || "initial expansions differ".into(),
    )?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let docs = random_batch(&mut rng, v, 3);
        let a = trainer.train_step(&as_batch(&docs)).unwrap();
        let b = reference.step(&as_batch(&docs));
        worst = worst.max((a - b).abs());
    }
    check(worst <= 1e-10, || format!("max loss gap {worst:.3e}"))?;
    Ok(format!("10 steps, max loss gap {worst:.2e} (tol 1e-10)"))
}

fn criterion_2() -> Outcome {
    let (v, d, n) = (20, 8, 4);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for s in 0..3u64 {
        let mut rng = common::rng(200 + s);
        let table = random_table(&mut rng, v, n, 0.8);
        let pre = EmbeddingMatrix::new(random_uniform_matrix(v, d, 0.5, 30 + s)).unwrap();
        let trainer = Trainer::new(small_config(Channel2Mode::GroupInitShare, s), &pre, Some(&table)).unwrap();
        let docs = random_batch(&mut rng, v, 3);
        let batch = as_batch(&docs);
        let dropout = Some((0.5, 99 + s));
        let loss_at = |g: &Array2<f64>| -> (f64, Option<Array2<f64>>) {
            let mut params = trainer.params.clone();
            let shared = params.shared_mut().unwrap();
            shared.group_values_mut().assign(g);
            shared.sync_forward();
            let (l, grads) = params
                .net
                .batch_loss_and_gradients(params.tables(), &batch, dropout)
                .unwrap();
            let gg = params.shared().unwrap().aggregate_gradients(grads.embed_s.as_ref().unwrap()).unwrap();
            (l, Some(gg))
        };
        let g0 = trainer.params.shared().unwrap().groups().values.clone();
        let analytic = loss_at(&g0).1.unwrap();
        let h = 1e-6;
        for k in 0..n {
            for j in 0..d {
                let mut gp = g0.clone();
                gp[[k, j]] += h;
                let mut gm = g0.clone();
                gm[[k, j]] -= h;
                let numeric = (loss_at(&gp).0 - loss_at(&gm).0) / (2.0 * h);
                let a = analytic[[k, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    check(worst <= 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("{checked} group-gradient entries over 3 seeds, max rel err {worst:.2e} (tol 1e-4)"))
}

fn criterion_3() -> Outcome {
    let (v, d) = (20, 8);
    let pre = EmbeddingMatrix::new(random_uniform_matrix(v, d, 0.5, 3)).unwrap();
    let table = GroupTable::singletons(v);
    let mut share_cfg = small_config(Channel2Mode::GroupInitShare, 5);
    share_cfg.signing_enabled = false;
    let mut plain_cfg = share_cfg.clone();
    plain_cfg.channel2_mode = Channel2Mode::Random;
    let mut share = Trainer::new(share_cfg, &pre, Some(&table)).unwrap();
    let mut plain = Trainer::new(plain_cfg, &pre, None).unwrap();
    // Plain two-channel model whose second channel starts from the pretrained matrix.
    plain.params.channel2 = Some(Channel2::Plain(plain.params.embed_p.clone()));
    check(share.params.shared().unwrap().values() == &share.params.embed_p, || {
        "initial shared matrix differs from the pretrained matrix".into()
    })?;
    check(share.params.net == plain.params.net, || "networks differ at init".into())?;
    let mut rng = common::rng(33);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let docs = random_batch(&mut rng, v, 3);
        let a = share.train_step(&as_batch(&docs)).unwrap();
        let b = plain.train_step(&as_batch(&docs)).unwrap();
        worst = worst.max((a - b).abs());
    }
    let gap = max_abs_diff(share.params.shared().unwrap().values(), plain.params.channel2.as_ref().unwrap().matrix());
    check(worst <= 1e-10 && gap <= 1e-10, || format!("loss gap {worst:.3e}, shared-matrix gap {gap:.3e}"))?;
    Ok(format!("shared init == pretrained exactly; 5 steps, loss gap {worst:.2e}, shared-matrix gap {gap:.2e} (tol 1e-10)"))
}

pub const FROZEN_BUCKETS: [usize; 8] = [11, 9, 2, 3, 11, 9, 11, 4];
pub const FROZEN_SIGNS: [i8; 8] = [1, -1, 1, 1, -1, 1, -1, 1];

fn criterion_4() -> Outcome {
    let spec = HashSpec::new(0x5eed, true);
    let (k, d) = (16usize, 10_000usize);
    let mut counts = vec![0u64; k];
    for j in 0..d {
        counts[spec.hash_dim(42, j, k).unwrap()] += 1;
    }
    let expected = d as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    check(p > 0.001, || format!("chi-square {chi2:.2}, p = {p:.2e}"))?;

    let draws = 100_000;
    let positive = (0..draws).filter(|&t| spec.sign(t / 100, t % 100) > 0).count();
    let frac = positive as f64 / draws as f64;
    check((frac - 0.5).abs() <= 0.02, || format!("positive sign fraction {frac:.4}"))?;

    let spec0 = HashSpec::new(0, true);
    let buckets: Vec<usize> = (0..8).map(|j| spec0.hash_dim(0, j, 16).unwrap()).collect();
    let signs: Vec<i8> = (0..8).map(|j| spec0.sign(0, j)).collect();
    check(buckets == FROZEN_BUCKETS && signs == FROZEN_SIGNS, || {
        format!("hash outputs changed: {buckets:?} {signs:?}")
    })?;
    Ok(format!(
        "chi2 = {chi2:.2} (15 dof, p = {p:.3}); positive signs {:.2}%; frozen outputs match",
        100.0 * frac
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = common::rng(5);
    for inst in 0..100 {
        let n = rng.gen_range(2..=500);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let hits = (0..n).filter(|&i| gold[i] == pred[i]).count();
        let acc = accuracy(&pred, &gold).unwrap();
        check(acc == hits as f64 / n as f64, || format!("accuracy mismatch on instance {inst}"))?;

        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        positive[0] = true;
        positive[1] = false;
        let levels = rng.gen_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let (mut twice_concordant, mut pairs) = (0u64, 0u64);
        for a in 0..n {
            for b in 0..n {
                if positive[a] && !positive[b] {
                    pairs += 1;
                    twice_concordant += match scores[a].partial_cmp(&scores[b]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let oracle = twice_concordant as f64 / (2 * pairs) as f64;
        let got = auc(&scores, &positive).unwrap();
        check(got == oracle, || format!("AUC {got} vs oracle {oracle} on instance {inst}"))?;
    }
    let perfect = auc(&[0.1, 0.2, 0.3, 0.7, 0.8], &[false, false, false, true, true]).unwrap();
    let ties = auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap();
    check(perfect == 1.0 && ties == 0.5, || format!("perfect {perfect}, ties {ties}"))?;
    Ok("100 random instances exact; perfect separation 1.0, all ties 0.5".into())
}

fn criterion_6() -> Outcome {
    let mut rng = common::rng(6);
    for inst in 0..100 {
        let v = rng.gen_range(1..60);
        let n = rng.gen_range(1..12);
        let d = rng.gen_range(1..9);
        let table = random_table(&mut rng, v, n, 0.7);
        let pre = random_uniform_matrix(v, d, 1.0, inst);
        let got = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        for k in 0..table.num_groups() {
            let members = table.members(k);
            for j in 0..d {
                let mut sum = 0.0;
                for &m in members {
                    sum += pre[[m, j]];
                }
                let mean = sum / members.len() as f64;
                check(got.values[[k, j]] == mean, || format!("instance {inst}, group {k}, dim {j}"))?;
            }
        }
    }
    Ok("100 random tables, group vectors equal member means exactly".into())
}

fn criterion_7() -> Outcome {
    let vocab = Vocabulary::from_words(
        ["Alagille_Syndrome", "Cholestasis", "Jaundice", "Liver_Diseases", "Hepatitis"]
            .map(String::from)
            .to_vec(),
    )
    .unwrap();
    let mesh = groups_from_mesh(fixture("mesh.txt"), &vocab, 3).map_err(|e| e.to_string())?;
    let key = mesh
        .keys()
        .iter()
        .position(|k| k == "C06.552.150")
        .ok_or("no C06.552.150 group")?;
    let members: Vec<&str> = mesh.members(key).iter().map(|&i| vocab.word(i).unwrap()).collect();
    check(members == ["Alagille_Syndrome", "Cholestasis", "Jaundice"], || {
        format!("C06.552.150 members {members:?}")
    })?;

    let words = ["able", "unable", "dorsal", "abaxial", "good", "nice", "bad"];
    let vocab = Vocabulary::from_words(words.map(String::from).to_vec()).unwrap();
    let senti = groups_from_sentiment_lexicon(fixture("sentilex.txt"), &vocab).map_err(|e| e.to_string())?;
    let dorsal = vocab.id("dorsal").unwrap();
    check(senti.k(dorsal) == 0 && senti.k(vocab.id("abaxial").unwrap()) == 0, || {
        "objective synset kept".into()
    })?;
    check(senti.stats().objective_skipped == 1 && senti.num_groups() == 4, || {
        format!("{} groups, {:?}", senti.num_groups(), senti.stats())
    })?;

    let dir = tempfile::tempdir().unwrap();
    let brown_path = dir.path().join("paths");
    let mut text = String::new();
    let mut words = Vec::new();
    for c in 0..1000u32 {
        let bits = format!("1{:b}", c);
        for w in 0..2 {
            let word = format!("w{c}_{w}");
            text.push_str(&format!("{bits}\t{word}\t{}\n", 10 + w));
            words.push(word);
        }
    }
    std::fs::write(&brown_path, text).unwrap();
    let vocab = Vocabulary::from_words(words).unwrap();
    let brown = groups_from_brown(&brown_path, &vocab).map_err(|e| e.to_string())?;
    check(brown.num_groups() == 1000, || format!("Brown N = {}", brown.num_groups()))?;
    Ok("MeSH C06.552.150.125 -> C06.552.150; objective synset dropped; Brown N = 1000".into())
}

fn criterion_8() -> Outcome {
    let spec = common::SynonymCorpusSpec {
        cues_per_doc: 2,
        ..Default::default()
    };
    let corpus = common::synonym_corpus(spec, 11);
    let pre = common::clustered_vectors(&corpus.vocab, 16, EXPERIMENT_VECTOR_NOISE, 5);
    let data = ExperimentData {
        dataset: corpus.dataset,
        pretrained: pre,
        groups: Some(corpus.groups),
    };
    let protocol = Protocol {
        folds: 5,
        replications: 5,
        epochs: EXPERIMENT_EPOCHS,
        batch_size: 50,
        seed: 1,
        metric: Metric::Accuracy,
        downsample: false,
        stratified: true,
    };
    let mut means = Vec::new();
    for mode in [Channel2Mode::Random, Channel2Mode::GroupInitNoShare, Channel2Mode::GroupInitShare] {
        let model = ModelConfig {
            filter_heights: vec![1, 2, 3],
            filters_per_height: 10,
            num_classes: 2,
            dropout_rate: 0.5,
            channel2_mode: mode,
            signing_enabled: EXPERIMENT_SIGNING,
            seed: 0,
            ..ModelConfig::default()
        };
        let report = run_experiment(&data, &model, &protocol, "", 1).map_err(|e| e.to_string())?;
        means.push(100.0 * report.mean);
    }
    let (random, no_share, share) = (means[0], means[1], means[2]);
    let summary = format!("random {random:.2}, group-init no-share {no_share:.2}, share {share:.2}");
    check(share >= random + 1.0, || format!("share not 1 point above random: {summary}"))?;
    let between = (random..=share).contains(&no_share);
    check(between || (no_share - share).abs() <= 0.5, || {
        format!("no-share outside the expected band: {summary}")
    })?;
    Ok(format!("mean accuracy over 5x5-fold CV: {summary}"))
}

const EXPERIMENT_EPOCHS: usize = 25;
const EXPERIMENT_SIGNING: bool = false;
const EXPERIMENT_VECTOR_NOISE: f64 = 4.0;

fn criterion_9() -> Outcome {
    let spec = common::SynonymCorpusSpec {
        docs: 200,
        sets: 6,
        set_size: 5,
        fillers: 30,
        ..Default::default()
    };
    let corpus = common::synonym_corpus(spec, 9);
    let pre = EmbeddingMatrix::new(random_uniform_matrix(corpus.vocab.len(), 4, 0.25, 1)).unwrap();
    let data = ExperimentData {
        dataset: corpus.dataset,
        pretrained: pre,
        groups: Some(corpus.groups),
    };
    let model = ModelConfig {
        filter_heights: vec![1, 2],
        filters_per_height: 2,
        ..ModelConfig::default()
    };
    let protocol = Protocol {
        folds: 10,
        replications: 5,
        epochs: 1,
        batch_size: 20,
        seed: 123,
        ..Protocol::default()
    };
    let a = run_experiment(&data, &model, &protocol, "seed = 123", 1).map_err(|e| e.to_string())?;
    let b = run_experiment(&data, &model, &protocol, "seed = 123", 1).map_err(|e| e.to_string())?;
    check(a.folds.len() == 50 && a.replications.len() == 5, || {
        format!("{} fold records, {} replications", a.folds.len(), a.replications.len())
    })?;
    for r in 0..5 {
        let test: usize = a.folds.iter().filter(|f| f.replication == r).map(|f| f.test_size).sum();
        check(test == 200, || format!("replication {r} tests {test} documents"))?;
    }
    let per_rep: Vec<f64> = a.replications.iter().map(|r| r.value).collect();
    let (mean, min, max) = summarize(&per_rep);
    check(mean == a.mean && min == a.min && max == a.max && min <= mean && mean <= max, || {
        "aggregate block inconsistent".into()
    })?;
    let text = a.render();
    check(text.contains("\n[summary]\n") && text.contains("\nmean=") && text.contains("\nmin=") && text.contains("\nmax="), || {
        "report lacks the summary block".into()
    })?;
    check(text == b.render(), || "reports differ between identical runs".into())?;
    Ok(format!("50 fold records, 5 replications, summary block present; {} report bytes reproduced", text.len()))
}

fn criterion_10() -> Outcome {
    let (v, d, n) = (20, 8, 4);
    let mut rng = common::rng(10);
    let table = random_table(&mut rng, v, n, 0.8);
    let pre = EmbeddingMatrix::new(random_uniform_matrix(v, d, 0.5, 8)).unwrap();
    let vocab = Vocabulary::from_words((0..v).map(|i| format!("w{i}")).collect()).unwrap();
    let mut worst: f64 = 0.0;
    for mode in [Channel2Mode::POnly, Channel2Mode::Random, Channel2Mode::GroupInitNoShare, Channel2Mode::GroupInitShare] {
        let mut trainer = Trainer::new(small_config(mode, 21), &pre, Some(&table)).unwrap();
        for _ in 0..3 {
            let docs = random_batch(&mut rng, v, 3);
            trainer.train_step(&as_batch(&docs)).unwrap();
        }
        let bytes = checkpoint_bytes(&trainer, &vocab).map_err(|e| e.to_string())?;
        let (mut resumed, _) = checkpoint_from_bytes(&bytes).map_err(|e| e.to_string())?;
        let docs = random_batch(&mut rng, v, 3);
        let la = trainer.train_step(&as_batch(&docs)).unwrap();
        let lb = resumed.train_step(&as_batch(&docs)).unwrap();
        worst = worst.max((la - lb).abs());
        worst = worst.max(max_abs_diff(&trainer.params.embed_p, &resumed.params.embed_p));
        if let (Some(a), Some(b)) = (&trainer.params.channel2, &resumed.params.channel2) {
            worst = worst.max(max_abs_diff(a.matrix(), b.matrix()));
        }
        worst = worst.max(max_abs_diff(&trainer.params.net.softmax_w, &resumed.params.net.softmax_w));
        let banks = |c: &ConvFilterBank| c.banks.iter().flat_map(|b| b.weights.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>();
        for (x, y) in banks(&trainer.params.net.conv_p).iter().zip(banks(&resumed.params.net.conv_p)) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-12, || format!("max divergence {worst:.3e}"))?;
    Ok(format!("all four modes, save->load->step vs uninterrupted: max divergence {worst:.2e} (tol 1e-12)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("tied-parameter oracle equivalence", criterion_1, Duration::from_secs(10)),
        ("group gradient finite-difference check", criterion_2, Duration::from_secs(60)),
        ("degenerate identity", criterion_3, Duration::MAX),
        ("hash quality", criterion_4, Duration::MAX),
        ("metric oracles", criterion_5, Duration::MAX),
        ("group init means", criterion_6, Duration::MAX),
        ("resource adapters", criterion_7, Duration::MAX),
        ("desk-scale directional experiment", criterion_8, Duration::from_secs(600)),
        ("protocol fidelity", criterion_9, Duration::MAX),
        ("checkpoint replay", criterion_10, Duration::MAX),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, run, budget)) in criteria.iter().enumerate() {
        let id = n + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let t = start.elapsed();
                if t > *budget {
                    Err(format!("{detail}; took {:.1}s, budget {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
                } else {
                    Ok(detail)
                }
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
