//! Two-channel convolutional classifier.
//!
//! Channel 1 reads the pretrained matrix; channel 2 reads a second
//! matrix whose origin depends on [`Channel2Mode`]. Each channel has its own
//! filter banks; every feature map is reduced by 1-max pooling, the pooled
//! values of both channels are concatenated (channel 1 first, heights in
//! configuration order), passed through dropout and a softmax layer.
//!
//! In [`Channel2Mode::GroupInitShare`] the second matrix is a
//! [`SharedEmbedding`]. A training step then runs
//!
//! 1. sync: rebuild the shared matrix from the group vectors;
//! 2. forward and backward over the mini-batch;
//! 3. fold the shared-matrix gradient into the group vectors and update
//!    them (and the private rows);
//! 4. update the pretrained matrix, filters and softmax.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::corpus::{random_uniform_matrix, EmbeddingMatrix, OovPolicy, Vocabulary};
use crate::groups::{init_group_embeddings, GroupTable};
use crate::hashshare::{HashSpec, Router, SharedEmbedding, MIXER_VERSION};
use crate::nnet::{
    self, adadelta_update, AdadeltaConfig, AdadeltaState, Activation, ConvFilterBank, FilterBank,
    Mode,
};
use crate::seed;
use crate::{Error, Result};

/// What the second channel is initialized from and whether it is tied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel2Mode {
    /// No second channel.
    POnly,
    /// Uniform random initialization, trained freely.
    Random,
    /// Initialized from hashed group vectors, rows trained independently.
    GroupInitNoShare,
    /// Hashed group sharing enforced throughout training.
    GroupInitShare,
}

impl Channel2Mode {
    pub fn uses_groups(self) -> bool {
        matches!(self, Channel2Mode::GroupInitNoShare | Channel2Mode::GroupInitShare)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel2Mode::POnly => "p_only",
            Channel2Mode::Random => "random",
            Channel2Mode::GroupInitNoShare => "group_init_no_share",
            Channel2Mode::GroupInitShare => "group_init_share",
        }
    }
}

impl std::str::FromStr for Channel2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_only" => Ok(Channel2Mode::POnly),
            "random" => Ok(Channel2Mode::Random),
            "group_init_no_share" => Ok(Channel2Mode::GroupInitNoShare),
            "group_init_share" => Ok(Channel2Mode::GroupInitShare),
            other => Err(Error::InvalidArgument(format!("unknown channel-2 mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub filter_heights: Vec<usize>,
    pub filters_per_height: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub channel2_mode: Channel2Mode,
    pub signing_enabled: bool,
    pub seed: u64,
    pub activation: Activation,
    pub adadelta: AdadeltaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            filter_heights: vec![3, 4, 5],
            filters_per_height: 100,
            num_classes: 2,
            dropout_rate: 0.5,
            channel2_mode: Channel2Mode::GroupInitShare,
            signing_enabled: true,
            seed: 0,
            activation: Activation::Relu,
            adadelta: AdadeltaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_heights.is_empty() {
            return Err(Error::Config("filter_heights must not be empty".into()));
        }
        if self.filter_heights.contains(&0) {
            return Err(Error::Config("filter heights must be at least 1".into()));
        }
        let mut hs = self.filter_heights.clone();
        hs.sort_unstable();
        if hs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("filter heights must be distinct".into()));
        }
        if self.filters_per_height == 0 {
            return Err(Error::Config("filters_per_height must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.adadelta.rho > 0.0 && self.adadelta.rho < 1.0 && self.adadelta.eps > 0.0) {
            return Err(Error::Config("adadelta needs 0 < rho < 1 and eps > 0".into()));
        }
        Ok(())
    }

    pub fn max_height(&self) -> usize {
        self.filter_heights.iter().copied().max().unwrap_or(1)
    }

    /// Length of the concatenated feature vector.
    pub fn num_features(&self) -> usize {
        let per_channel = self.filter_heights.len() * self.filters_per_height;
        match self.channel2_mode {
            Channel2Mode::POnly => per_channel,
            _ => 2 * per_channel,
        }
    }

    /// Seed of the hashing functions.
    pub fn hash_spec(&self) -> HashSpec {
        HashSpec::new(seed::derive(self.seed, "hash", &[]), self.signing_enabled)
    }
}

/// Embedding tables read by the two channels. Row `pad_id` is an implicit
/// zero vector, `pad_id` being the table row count.
#[derive(Debug, Clone, Copy)]
pub struct Tables<'a> {
    pub embed_p: &'a Array2<f64>,
    pub embed_s: Option<&'a Array2<f64>>,
}

impl Tables<'_> {
    pub fn pad_id(&self) -> usize {
        self.embed_p.nrows()
    }
}

/// Filters and softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub conv_p: ConvFilterBank,
    pub conv_s: Option<ConvFilterBank>,
    /// `num_features × num_classes`.
    pub softmax_w: Array2<f64>,
    pub softmax_b: Array1<f64>,
    pub activation: Activation,
}

/// Intermediates of one document's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<usize>,
    argmax: Vec<usize>,
    /// Pooled features before dropout.
    pub features: Vec<f64>,
    mask: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradients mirroring [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed_p: Array2<f64>,
    pub embed_s: Option<Array2<f64>>,
    pub conv_p: ConvFilterBank,
    pub conv_s: Option<ConvFilterBank>,
    pub softmax_w: Array2<f64>,
    pub softmax_b: Array1<f64>,
}

/// Number of windows of height `h` that touch at least one real token, for
/// a sequence of `real` tokens padded to `padded`.
fn live_windows(real: usize, padded: usize, h: usize) -> usize {
    real.min(padded + 1 - h)
}

/// Appends `pad_id` until `doc` has at least `min_len` tokens.
pub fn pad_document(doc: &[usize], min_len: usize, pad_id: usize) -> Vec<usize> {
    let mut out = doc.to_vec();
    if out.len() < min_len {
        out.resize(min_len, pad_id);
    }
    out
}

fn lookup(table: &Array2<f64>, ids: &[usize], pad_id: usize) -> Result<Vec<f64>> {
    let d = table.ncols();
    let rows = table.nrows();
    let src = table.as_slice().expect("standard layout");
    let mut out = vec![0.0; ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        if id == pad_id {
            continue;
        }
        if id >= rows {
            return Err(Error::InvalidArgument(format!("token id {id} outside {rows}-row table")));
        }
        out[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
    }
    Ok(out)
}

impl Network {
    pub fn init(config: &ModelConfig, dim: usize) -> Result<Self> {
        let mut rng = seed::rng(seed::derive(config.seed, "filters", &[]));
        let conv_p = ConvFilterBank::init(&config.filter_heights, config.filters_per_height, dim, &mut rng)?;
        let conv_s = match config.channel2_mode {
            Channel2Mode::POnly => None,
            _ => Some(ConvFilterBank::init(
                &config.filter_heights,
                config.filters_per_height,
                dim,
                &mut rng,
            )?),
        };
        let nf = config.num_features();
        let c = config.num_classes;
        let limit = (6.0 / (nf + c) as f64).sqrt();
        let mut srng = seed::rng(seed::derive(config.seed, "softmax", &[]));
        let softmax_w = Array2::from_shape_simple_fn((nf, c), || {
            use rand::Rng;
            srng.gen_range(-limit..=limit)
        });
        Ok(Network {
            conv_p,
            conv_s,
            softmax_w,
            softmax_b: Array1::zeros(c),
            activation: config.activation,
        })
    }

    fn channels(&self) -> impl Iterator<Item = &ConvFilterBank> {
        std::iter::once(&self.conv_p).chain(self.conv_s.as_ref())
    }

    pub fn max_height(&self) -> usize {
        self.conv_p.max_height()
    }

    pub fn num_classes(&self) -> usize {
        self.softmax_b.len()
    }

    /// Forward pass over one document, which must already be padded to the
    /// largest filter height. `dropout` is `(rate, seed)` in training mode.
    pub fn forward(
        &self,
        tables: Tables<'_>,
        doc: &[usize],
        dropout: Option<(f64, u64)>,
    ) -> Result<ForwardCache> {
        let pad = tables.pad_id();
        let padded = doc.len();
        if padded < self.max_height() {
            return Err(Error::Shape(format!(
                "document of length {padded} shorter than filter height {}; pad it first",
                self.max_height()
            )));
        }
        let real = doc.iter().take_while(|&&t| t != pad).count();
        if real == 0 || doc[real..].iter().any(|&t| t != pad) {
            return Err(Error::InvalidArgument(
                "document must be real tokens followed only by padding".into(),
            ));
        }
        if self.conv_s.is_some() != tables.embed_s.is_some() {
            return Err(Error::Shape("channel-2 table presence does not match the network".into()));
        }
        let inputs = [
            Some(lookup(tables.embed_p, doc, pad)?),
            tables.embed_s.map(|m| lookup(m, doc, pad)).transpose()?,
        ];
        let mut features = Vec::with_capacity(self.softmax_w.nrows());
        let mut argmax = Vec::with_capacity(self.softmax_w.nrows());
        for (bank_set, input) in self.channels().zip(inputs.iter().flatten()) {
            for bank in &bank_set.banks {
                let windows = live_windows(real, padded, bank.height());
                for f in 0..bank.num_filters() {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for t in 0..windows {
                        let y = self.activation.apply(nnet::window_response(input, bank, f, t));
                        if y > best.0 {
                            best = (y, t);
                        }
                    }
                    features.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let (dropped, mask) = match dropout {
            Some((rate, s)) => nnet::dropout(&features, rate, Mode::Train, s)?,
            None => nnet::dropout(&features, 0.0, Mode::Eval, 0)?,
        };
        let c = self.num_classes();
        let mut logits = self.softmax_b.to_vec();
        for (f, &x) in dropped.iter().enumerate() {
            if x != 0.0 {
                for k in 0..c {
                    logits[k] += x * self.softmax_w[[f, k]];
                }
            }
        }
        let probs = nnet::softmax(&logits);
        Ok(ForwardCache {
            ids: doc.to_vec(),
            argmax,
            features,
            mask,
            logits,
            probs,
        })
    }

    pub fn zero_gradients(&self, tables: Tables<'_>) -> Gradients {
        Gradients {
            embed_p: Array2::zeros(tables.embed_p.dim()),
            embed_s: tables.embed_s.map(|m| Array2::zeros(m.dim())),
            conv_p: self.conv_p.zeros_like(),
            conv_s: self.conv_s.as_ref().map(ConvFilterBank::zeros_like),
            softmax_w: Array2::zeros(self.softmax_w.dim()),
            softmax_b: Array1::zeros(self.softmax_b.len()),
        }
    }

    /// Accumulates `scale ·` the gradient of `-ln p[label]` into `grads`.
    pub fn backward(
        &self,
        tables: Tables<'_>,
        cache: &ForwardCache,
        label: usize,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        let dlogits = nnet::xent_backward(&cache.probs, label)?;
        let c = dlogits.len();
        let mut dfeat = vec![0.0; cache.features.len()];
        for f in 0..cache.features.len() {
            let x = cache.features[f] * cache.mask[f];
            let mut acc = 0.0;
            for k in 0..c {
                let g = scale * dlogits[k];
                grads.softmax_w[[f, k]] += x * g;
                acc += self.softmax_w[[f, k]] * g;
            }
            dfeat[f] = acc * cache.mask[f];
        }
        for k in 0..c {
            grads.softmax_b[k] += scale * dlogits[k];
        }

        let pad = tables.pad_id();
        let mut fi = 0;
        fi = self.backprop_channel(
            &self.conv_p,
            &mut grads.conv_p,
            tables.embed_p,
            &mut grads.embed_p,
            cache,
            &dfeat,
            fi,
            pad,
        );
        if let (Some(bs), Some(bg), Some(t), Some(tg)) = (
            self.conv_s.as_ref(),
            grads.conv_s.as_mut(),
            tables.embed_s,
            grads.embed_s.as_mut(),
        ) {
            fi = self.backprop_channel(bs, bg, t, tg, cache, &dfeat, fi, pad);
        }
        debug_assert_eq!(fi, cache.features.len());
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_channel(
        &self,
        bank_set: &ConvFilterBank,
        bank_grads: &mut ConvFilterBank,
        table: &Array2<f64>,
        table_grad: &mut Array2<f64>,
        cache: &ForwardCache,
        dfeat: &[f64],
        mut fi: usize,
        pad: usize,
    ) -> usize {
        let d = table.ncols();
        let src = table.as_slice().expect("standard layout");
        let tg = table_grad.as_slice_mut().expect("standard layout");
        for (bank, bgrad) in bank_set.banks.iter().zip(bank_grads.banks.iter_mut()) {
            let h = bank.height();
            let wgrad = bgrad.weights.as_slice_mut().expect("standard layout");
            for f in 0..bank.num_filters() {
                let g = dfeat[fi] * self.activation.grad_from_output(cache.features[fi]);
                let t = cache.argmax[fi];
                fi += 1;
                if g == 0.0 {
                    continue;
                }
                bgrad.bias[f] += g;
                let w = bank.filter(f);
                for r in 0..h {
                    let id = cache.ids[t + r];
                    if id == pad {
                        continue;
                    }
                    let row = &src[id * d..(id + 1) * d];
                    let wg = &mut wgrad[(f * h + r) * d..(f * h + r + 1) * d];
                    for (a, &x) in wg.iter_mut().zip(row) {
                        *a += g * x;
                    }
                    let eg = &mut tg[id * d..(id + 1) * d];
                    for (a, &wv) in eg.iter_mut().zip(&w[r * d..(r + 1) * d]) {
                        *a += g * wv;
                    }
                }
            }
        }
        fi
    }

    /// Mean loss of a batch and its gradient. Documents are padded here.
    /// `dropout` is `(rate, step_seed)`; document `n` of the batch uses
    /// `derive(step_seed, "doc", [n])`.
    pub fn batch_loss_and_gradients(
        &self,
        tables: Tables<'_>,
        batch: &[(&[usize], usize)],
        dropout: Option<(f64, u64)>,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty mini-batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zero_gradients(tables);
        let mut loss = 0.0;
        for (n, &(doc, label)) in batch.iter().enumerate() {
            let doc = pad_document(doc, self.max_height(), tables.pad_id());
            let drop = dropout.map(|(rate, s)| (rate, seed::derive(s, "doc", &[n as u64])));
            let cache = self.forward(tables, &doc, drop)?;
            let (l, _) = nnet::softmax_xent(&cache.logits, label)?;
            loss += l;
            self.backward(tables, &cache, label, scale, &mut grads)?;
        }
        Ok((loss * scale, grads))
    }
}

/// The second channel's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Channel2 {
    Plain(Array2<f64>),
    Shared {
        shared: SharedEmbedding,
        table: GroupTable,
        /// `None` when routed by a custom [`Router`]; such models cannot be
        /// checkpointed.
        spec: Option<HashSpec>,
    },
}

impl Channel2 {
    pub fn matrix(&self) -> &Array2<f64> {
        match self {
            Channel2::Plain(m) => m,
            Channel2::Shared { shared, .. } => shared.values(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(V + 1) × d`: vocabulary rows plus the UNK row.
    pub embed_p: Array2<f64>,
    pub channel2: Option<Channel2>,
    pub net: Network,
}

impl ModelParams {
    pub fn tables(&self) -> Tables<'_> {
        Tables {
            embed_p: &self.embed_p,
            embed_s: self.channel2.as_ref().map(Channel2::matrix),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed_p.ncols()
    }

    /// Number of embedding rows (vocabulary + UNK).
    pub fn rows(&self) -> usize {
        self.embed_p.nrows()
    }

    pub fn shared(&self) -> Option<&SharedEmbedding> {
        match &self.channel2 {
            Some(Channel2::Shared { shared, .. }) => Some(shared),
            _ => None,
        }
    }

    pub fn shared_mut(&mut self) -> Option<&mut SharedEmbedding> {
        match &mut self.channel2 {
            Some(Channel2::Shared { shared, .. }) => Some(shared),
            _ => None,
        }
    }
}

/// Per-tensor Adadelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub embed_p: AdadeltaState,
    pub channel2: Option<AdadeltaState>,
    pub groups: Option<AdadeltaState>,
    pub conv_p: Vec<(AdadeltaState, AdadeltaState)>,
    pub conv_s: Option<Vec<(AdadeltaState, AdadeltaState)>>,
    pub softmax_w: AdadeltaState,
    pub softmax_b: AdadeltaState,
}

fn bank_states(banks: &ConvFilterBank) -> Vec<(AdadeltaState, AdadeltaState)> {
    banks
        .banks
        .iter()
        .map(|b| (AdadeltaState::new(b.weights.len()), AdadeltaState::new(b.bias.len())))
        .collect()
}

impl OptimizerState {
    pub fn for_params(params: &ModelParams) -> Self {
        OptimizerState {
            embed_p: AdadeltaState::new(params.embed_p.len()),
            channel2: params.channel2.as_ref().map(|c| AdadeltaState::new(c.matrix().len())),
            groups: params.shared().map(|s| AdadeltaState::new(s.groups().values.len())),
            conv_p: bank_states(&params.net.conv_p),
            conv_s: params.net.conv_s.as_ref().map(bank_states),
            softmax_w: AdadeltaState::new(params.net.softmax_w.len()),
            softmax_b: AdadeltaState::new(params.net.softmax_b.len()),
        }
    }
}

/// Prediction for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Probability of class 1 (the positive class in binary tasks).
    pub score: f64,
    pub probs: Vec<f64>,
}

/// Lowest index among maximal probabilities.
pub fn argmax_label(probs: &[f64]) -> usize {
    nnet::maxpool1(probs).map(|(_, i)| i).unwrap_or(0)
}

/// Parameters, optimizer state and step counter of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub step: u64,
}

impl Trainer {
    /// Builds a model over `pretrained` (one row per vocabulary word; the UNK
    /// row is appended here). `groups` is required by the group modes.
    pub fn new(
        config: ModelConfig,
        pretrained: &EmbeddingMatrix,
        groups: Option<&GroupTable>,
    ) -> Result<Self> {
        let spec = config.hash_spec();
        Self::build(config, pretrained, groups, &spec, Some(spec))
    }

    /// As [`Trainer::new`] with explicit routing.
    pub fn with_router(
        config: ModelConfig,
        pretrained: &EmbeddingMatrix,
        groups: Option<&GroupTable>,
        router: &dyn Router,
    ) -> Result<Self> {
        Self::build(config, pretrained, groups, router, None)
    }

    fn build(
        config: ModelConfig,
        pretrained: &EmbeddingMatrix,
        groups: Option<&GroupTable>,
        router: &dyn Router,
        spec: Option<HashSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d) = (pretrained.rows(), pretrained.dim());
        let unk = random_uniform_matrix(1, d, OovPolicy::DEFAULT_SCALE, seed::derive(config.seed, "unk", &[]));
        let embed_p = ndarray::concatenate![ndarray::Axis(0), pretrained.values().view(), unk.view()];
        let rows = v + 1;

        let table = if config.channel2_mode.uses_groups() {
            let t = groups.ok_or_else(|| {
                Error::Config(format!("mode {} needs a group table", config.channel2_mode.as_str()))
            })?;
            if t.num_words() > v {
                return Err(Error::Shape(format!(
                    "group table covers {} words, pretrained matrix has {v}",
                    t.num_words()
                )));
            }
            Some(t.clone().with_num_words(rows)?)
        } else {
            None
        };

        let channel2 = match config.channel2_mode {
            Channel2Mode::POnly => None,
            Channel2Mode::Random => Some(Channel2::Plain(random_uniform_matrix(
                rows,
                d,
                OovPolicy::DEFAULT_SCALE,
                seed::derive(config.seed, "channel2", &[]),
            ))),
            Channel2Mode::GroupInitNoShare | Channel2Mode::GroupInitShare => {
                let table = table.expect("group modes resolved a table");
                let g = init_group_embeddings(&table, pretrained)?;
                let shared = SharedEmbedding::with_router(&table, g, &embed_p, router)?;
                if config.channel2_mode == Channel2Mode::GroupInitShare {
                    Some(Channel2::Shared { shared, table, spec })
                } else {
                    Some(Channel2::Plain(shared.values().clone()))
                }
            }
        };

        let net = Network::init(&config, d)?;
        let params = ModelParams {
            embed_p,
            channel2,
            net,
        };
        let opt = OptimizerState::for_params(&params);
        Ok(Trainer {
            config,
            params,
            opt,
            step: 0,
        })
    }

    /// Recomputes the shared matrix from the group vectors (no-op outside share mode).
    pub fn sync(&mut self) {
        if let Some(shared) = self.params.shared_mut() {
            shared.sync_forward();
        }
    }

    /// One optimization step on a mini-batch of `(tokens, label)` pairs.
    /// Returns the mean loss before the update.
    pub fn train_step(&mut self, batch: &[(&[usize], usize)]) -> Result<f64> {
        self.sync();
        let dropout = (self.config.dropout_rate > 0.0).then(|| {
            (
                self.config.dropout_rate,
                seed::derive(self.config.seed, "dropout", &[self.step]),
            )
        });
        let (loss, grads) = self
            .params
            .net
            .batch_loss_and_gradients(self.params.tables(), batch, dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (batch of {})",
                self.step,
                batch.len()
            )));
        }
        self.apply(grads)?;
        self.step += 1;
        self.sync();
        Ok(loss)
    }

    fn apply(&mut self, grads: Gradients) -> Result<()> {
        let cfg = self.config.adadelta;
        let opt = &mut self.opt;
        let params = &mut self.params;

        if let (Some(ch), Some(mut g2)) = (params.channel2.as_mut(), grads.embed_s) {
            let st = opt.channel2.as_mut().expect("state mirrors params");
            match ch {
                Channel2::Plain(m) => adadelta_update(m, &g2, st, &cfg)?,
                Channel2::Shared { shared, .. } => {
                    let gg = shared.aggregate_gradients(&g2)?;
                    let gst = opt.groups.as_mut().expect("state mirrors params");
                    adadelta_update(shared.group_values_mut(), &gg, gst, &cfg)?;
                    for i in 0..g2.nrows() {
                        if !shared.is_private(i) {
                            g2.row_mut(i).fill(0.0);
                        }
                    }
                    adadelta_update(shared.values_mut(), &g2, st, &cfg)?;
                }
            }
        }

        adadelta_update(&mut params.embed_p, &grads.embed_p, &mut opt.embed_p, &cfg)?;
        update_banks(&mut params.net.conv_p, &grads.conv_p, &mut opt.conv_p, &cfg)?;
        if let (Some(p), Some(g), Some(s)) = (
            params.net.conv_s.as_mut(),
            grads.conv_s.as_ref(),
            opt.conv_s.as_mut(),
        ) {
            update_banks(p, g, s, &cfg)?;
        }
        adadelta_update(&mut params.net.softmax_w, &grads.softmax_w, &mut opt.softmax_w, &cfg)?;
        adadelta_update(&mut params.net.softmax_b, &grads.softmax_b, &mut opt.softmax_b, &cfg)?;
        Ok(())
    }

    /// Mean loss over `batch` without dropout and without updating.
    pub fn evaluate_loss(&self, batch: &[(&[usize], usize)]) -> Result<f64> {
        Ok(self
            .params
            .net
            .batch_loss_and_gradients(self.params.tables(), batch, None)?
            .0)
    }

    pub fn predict_one(&self, doc: &[usize]) -> Result<Prediction> {
        let tables = self.params.tables();
        let doc = pad_document(doc, self.params.net.max_height(), tables.pad_id());
        let cache = self.params.net.forward(tables, &doc, None)?;
        Ok(Prediction {
            label: argmax_label(&cache.probs),
            score: cache.probs.get(1).copied().unwrap_or(0.0),
            probs: cache.probs,
        })
    }

    pub fn predict<D: AsRef<[usize]>>(&self, docs: &[D]) -> Result<Vec<Prediction>> {
        docs.iter().map(|d| self.predict_one(d.as_ref())).collect()
    }
}

fn update_banks(
    params: &mut ConvFilterBank,
    grads: &ConvFilterBank,
    states: &mut [(AdadeltaState, AdadeltaState)],
    cfg: &AdadeltaConfig,
) -> Result<()> {
    for ((p, g), (sw, sb)) in params.banks.iter_mut().zip(&grads.banks).zip(states) {
        adadelta_update(&mut p.weights, &g.weights, sw, cfg)?;
        adadelta_update(&mut p.bias, &g.bias, sb, cfg)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"GTIECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Section tags, in file order.
pub mod tags {
    pub const CONFIG: [u8; 4] = *b"CONF";
    pub const VOCAB: [u8; 4] = *b"VOCB";
    pub const EMBED_P: [u8; 4] = *b"EMBP";
    pub const CH2_PLAIN: [u8; 4] = *b"C2PL";
    pub const CH2_SHARED: [u8; 4] = *b"C2SH";
    pub const GROUPS: [u8; 4] = *b"GRPS";
    pub const HASH: [u8; 4] = *b"HASH";
    pub const CONV_P: [u8; 4] = *b"CNVP";
    pub const CONV_S: [u8; 4] = *b"CNVS";
    pub const SOFTMAX: [u8; 4] = *b"SOFT";
    pub const OPTIM: [u8; 4] = *b"OPTM";
    pub const STEP: [u8; 4] = *b"STEP";
}

type W = Vec<u8>;

fn put_u64(w: &mut W, v: u64) {
    w.write_u64::<LittleEndian>(v).expect("vec write");
}

fn put_f64s(w: &mut W, vs: &[f64]) {
    put_u64(w, vs.len() as u64);
    for &v in vs {
        w.write_f64::<LittleEndian>(v).expect("vec write");
    }
}

fn put_str(w: &mut W, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_matrix(w: &mut W, m: &Array2<f64>) {
    put_u64(w, m.nrows() as u64);
    put_u64(w, m.ncols() as u64);
    put_f64s(w, m.as_slice().expect("standard layout"));
}

fn put_banks(w: &mut W, banks: &ConvFilterBank) {
    put_u64(w, banks.banks.len() as u64);
    for b in &banks.banks {
        let (f, h, d) = b.weights.dim();
        put_u64(w, f as u64);
        put_u64(w, h as u64);
        put_u64(w, d as u64);
        put_f64s(w, b.weights.as_slice().expect("standard layout"));
        put_f64s(w, b.bias.as_slice().expect("standard layout"));
    }
}

fn put_state(w: &mut W, s: &AdadeltaState) {
    put_f64s(w, &s.sq_grad);
    put_f64s(w, &s.sq_update);
}

fn put_opt_state(w: &mut W, s: Option<&AdadeltaState>) {
    match s {
        Some(s) => {
            w.push(1);
            put_state(w, s);
        }
        None => w.push(0),
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt {what}"))
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader {
            cur: Cursor::new(bytes),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| corrupt("byte"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| corrupt("integer"))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n > remaining {
            return Err(corrupt("length"));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64).saturating_mul(8) > remaining {
            return Err(corrupt("float array"));
        }
        let mut v = vec![0.0; n];
        self.cur
            .read_f64_into::<LittleEndian>(&mut v)
            .map_err(|_| corrupt("float array"))?;
        Ok(v)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).map_err(|_| corrupt("string"))?;
        String::from_utf8(buf).map_err(|_| corrupt("string encoding"))
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let data = self.f64s()?;
        Array2::from_shape_vec((r, c), data).map_err(|_| corrupt("matrix shape"))
    }

    fn banks(&mut self) -> Result<ConvFilterBank> {
        let n = self.u64()? as usize;
        let mut banks = Vec::new();
        for _ in 0..n {
            let f = self.u64()? as usize;
            let h = self.u64()? as usize;
            let d = self.u64()? as usize;
            let weights = Array3::from_shape_vec((f, h, d), self.f64s()?).map_err(|_| corrupt("filter shape"))?;
            let bias = Array1::from_vec(self.f64s()?);
            if bias.len() != f {
                return Err(corrupt("filter bias"));
            }
            banks.push(FilterBank { weights, bias });
        }
        Ok(ConvFilterBank { banks })
    }

    fn state(&mut self) -> Result<AdadeltaState> {
        let sq_grad = self.f64s()?;
        let sq_update = self.f64s()?;
        if sq_grad.len() != sq_update.len() {
            return Err(corrupt("optimizer state"));
        }
        Ok(AdadeltaState { sq_grad, sq_update })
    }

    fn opt_state(&mut self) -> Result<Option<AdadeltaState>> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.state().map(Some),
            _ => Err(corrupt("optimizer flag")),
        }
    }

    fn done(&self) -> Result<()> {
        if self.cur.position() as usize != self.cur.get_ref().len() {
            return Err(Error::Checkpoint("trailing bytes in section".into()));
        }
        Ok(())
    }
}

fn section(out: &mut W, tag: [u8; 4], payload: W) {
    out.extend_from_slice(&tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(&payload);
}

/// Serializes a trainer and the vocabulary it was built over.
pub fn checkpoint_bytes(trainer: &Trainer, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if trainer.params.rows() != vocab.table_rows() {
        return Err(Error::Shape(format!(
            "model has {} embedding rows, vocabulary needs {}",
            trainer.params.rows(),
            vocab.table_rows()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(MIXER_VERSION)?;

    let config = toml::to_string(&trainer.config)
        .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    let mut p = W::new();
    put_str(&mut p, &config);
    section(&mut out, tags::CONFIG, p);

    let mut p = W::new();
    put_u64(&mut p, vocab.fingerprint());
    put_u64(&mut p, vocab.len() as u64);
    for w in vocab.words() {
        put_str(&mut p, w);
    }
    section(&mut out, tags::VOCAB, p);

    let mut p = W::new();
    put_matrix(&mut p, &trainer.params.embed_p);
    section(&mut out, tags::EMBED_P, p);

    match &trainer.params.channel2 {
        None => {}
        Some(Channel2::Plain(m)) => {
            let mut p = W::new();
            put_matrix(&mut p, m);
            section(&mut out, tags::CH2_PLAIN, p);
        }
        Some(Channel2::Shared { shared, table, spec }) => {
            let spec = spec.ok_or_else(|| {
                Error::Checkpoint("models with custom routing cannot be checkpointed".into())
            })?;
            let mut p = W::new();
            put_u64(&mut p, table.num_groups() as u64);
            for k in 0..table.num_groups() {
                put_str(&mut p, table.key(k));
            }
            put_u64(&mut p, table.num_words() as u64);
            for i in 0..table.num_words() {
                let gs = table.groups_of(i);
                put_u64(&mut p, gs.len() as u64);
                for &k in gs {
                    put_u64(&mut p, k as u64);
                }
            }
            section(&mut out, tags::GROUPS, p);

            let mut p = W::new();
            put_u64(&mut p, spec.seed);
            p.push(spec.signing_enabled as u8);
            p.write_u32::<LittleEndian>(MIXER_VERSION)?;
            section(&mut out, tags::HASH, p);

            let mut p = W::new();
            put_matrix(&mut p, &shared.groups().values);
            put_u64(&mut p, shared.groups().member_counts.len() as u64);
            for &c in &shared.groups().member_counts {
                put_u64(&mut p, c as u64);
            }
            let private = shared.plan().private_rows();
            put_u64(&mut p, private.len() as u64);
            for &i in private {
                put_u64(&mut p, i as u64);
                put_f64s(&mut p, shared.values().row(i).as_slice().expect("row contiguous"));
            }
            section(&mut out, tags::CH2_SHARED, p);
        }
    }

    let mut p = W::new();
    put_banks(&mut p, &trainer.params.net.conv_p);
    section(&mut out, tags::CONV_P, p);
    if let Some(cs) = &trainer.params.net.conv_s {
        let mut p = W::new();
        put_banks(&mut p, cs);
        section(&mut out, tags::CONV_S, p);
    }

    let mut p = W::new();
    put_matrix(&mut p, &trainer.params.net.softmax_w);
    put_f64s(&mut p, trainer.params.net.softmax_b.as_slice().expect("contiguous"));
    section(&mut out, tags::SOFTMAX, p);

    let o = &trainer.opt;
    let mut p = W::new();
    put_state(&mut p, &o.embed_p);
    put_opt_state(&mut p, o.channel2.as_ref());
    put_opt_state(&mut p, o.groups.as_ref());
    for states in std::iter::once(&o.conv_p).chain(o.conv_s.as_ref()) {
        put_u64(&mut p, states.len() as u64);
        for (w, b) in states {
            put_state(&mut p, w);
            put_state(&mut p, b);
        }
    }
    put_state(&mut p, &o.softmax_w);
    put_state(&mut p, &o.softmax_b);
    section(&mut out, tags::OPTIM, p);

    let mut p = W::new();
    put_u64(&mut p, trainer.step);
    section(&mut out, tags::STEP, p);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("empty checkpoint path".into()));
    }
    let bytes = checkpoint_bytes(trainer, vocab)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Splits a checkpoint into `(tag, payload)` sections after checking the
/// header.
pub fn checkpoint_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mixer = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if mixer != MIXER_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint uses hash mixer v{mixer}, this build has v{MIXER_VERSION}"
        )));
    }
    let mut pos = 16;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(corrupt("section header"));
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        if len > (bytes.len() - pos) as u64 {
            return Err(corrupt("section length"));
        }
        out.push((tag, &bytes[pos..pos + len as usize]));
        pos += len as usize;
    }
    Ok(out)
}

/// Inverse of [`checkpoint_bytes`].
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Trainer, Vocabulary)> {
    let sections = checkpoint_sections(bytes)?;
    let find = |tag: [u8; 4]| sections.iter().find(|(t, _)| *t == tag).map(|(_, p)| *p);
    let need = |tag: [u8; 4]| {
        find(tag).ok_or_else(|| {
            Error::Checkpoint(format!("missing section {}", String::from_utf8_lossy(&tag)))
        })
    };

    let mut r = Reader::new(need(tags::CONFIG)?);
    let config: ModelConfig = toml::from_str(&r.string()?)
        .map_err(|e| Error::Checkpoint(format!("bad config section: {e}")))?;
    r.done()?;
    config.validate()?;

    let mut r = Reader::new(need(tags::VOCAB)?);
    let fingerprint = r.u64()?;
    let n = r.u64()? as usize;
    let words = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.done()?;
    let vocab = Vocabulary::from_words(words)?;
    if vocab.fingerprint() != fingerprint {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }

    let mut r = Reader::new(need(tags::EMBED_P)?);
    let embed_p = r.matrix()?;
    r.done()?;
    if embed_p.nrows() != vocab.table_rows() {
        return Err(Error::Checkpoint("embedding rows do not match vocabulary".into()));
    }

    let channel2 = match config.channel2_mode {
        Channel2Mode::POnly => None,
        Channel2Mode::Random | Channel2Mode::GroupInitNoShare => {
            let mut r = Reader::new(need(tags::CH2_PLAIN)?);
            let m = r.matrix()?;
            r.done()?;
            Some(Channel2::Plain(m))
        }
        Channel2Mode::GroupInitShare => {
            let mut r = Reader::new(need(tags::GROUPS)?);
            let n_groups = r.u64()? as usize;
            let keys = (0..n_groups).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
            let n_words = r.u64()? as usize;
            let mut membership = Vec::with_capacity(n_words.min(1 << 24));
            for _ in 0..n_words {
                let k = r.len()?;
                membership.push((0..k).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
            }
            r.done()?;
            let table = GroupTable::from_parts(keys, membership)?;

            let mut r = Reader::new(need(tags::HASH)?);
            let spec = HashSpec::new(r.u64()?, r.u8()? != 0);
            let mut v4 = [0u8; 4];
            r.cur.read_exact(&mut v4).map_err(|_| corrupt("hash section"))?;
            r.done()?;
            if u32::from_le_bytes(v4) != MIXER_VERSION {
                return Err(Error::Checkpoint("hash mixer version mismatch".into()));
            }

            let mut r = Reader::new(need(tags::CH2_SHARED)?);
            let gvals = r.matrix()?;
            let nc = r.len()?;
            let member_counts = (0..nc).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let np = r.len()?;
            let mut values = Array2::zeros(embed_p.dim());
            for _ in 0..np {
                let i = r.u64()? as usize;
                let row = r.f64s()?;
                if i >= values.nrows() || row.len() != values.ncols() {
                    return Err(corrupt("private row"));
                }
                values.row_mut(i).assign(&Array1::from_vec(row));
            }
            r.done()?;
            let plan = crate::hashshare::SharingPlan::build(&table, embed_p.nrows(), embed_p.ncols(), &spec)?;
            if plan.private_rows().len() != np {
                return Err(Error::Checkpoint("private rows do not match the group table".into()));
            }
            let groups = crate::groups::GroupEmbeddings {
                values: gvals,
                member_counts,
            };
            let shared = SharedEmbedding::from_parts(plan, groups, values)?;
            Some(Channel2::Shared {
                shared,
                table,
                spec: Some(spec),
            })
        }
    };

    let mut r = Reader::new(need(tags::CONV_P)?);
    let conv_p = r.banks()?;
    r.done()?;
    let conv_s = match find(tags::CONV_S) {
        Some(p) => {
            let mut r = Reader::new(p);
            let b = r.banks()?;
            r.done()?;
            Some(b)
        }
        None => None,
    };
    if conv_s.is_some() != channel2.is_some() {
        return Err(Error::Checkpoint("channel-2 filters do not match channel-2 store".into()));
    }

    let mut r = Reader::new(need(tags::SOFTMAX)?);
    let softmax_w = r.matrix()?;
    let softmax_b = Array1::from_vec(r.f64s()?);
    r.done()?;

    let params = ModelParams {
        embed_p,
        channel2,
        net: Network {
            conv_p,
            conv_s,
            softmax_w,
            softmax_b,
            activation: config.activation,
        },
    };

    let mut r = Reader::new(need(tags::OPTIM)?);
    let embed_state = r.state()?;
    let channel2_state = r.opt_state()?;
    let groups_state = r.opt_state()?;
    let read_banks = |r: &mut Reader| -> Result<Vec<(AdadeltaState, AdadeltaState)>> {
        let n = r.len()?;
        (0..n).map(|_| Ok((r.state()?, r.state()?))).collect()
    };
    let conv_p_state = read_banks(&mut r)?;
    let conv_s_state = if params.net.conv_s.is_some() {
        Some(read_banks(&mut r)?)
    } else {
        None
    };
    let opt = OptimizerState {
        embed_p: embed_state,
        channel2: channel2_state,
        groups: groups_state,
        conv_p: conv_p_state,
        conv_s: conv_s_state,
        softmax_w: r.state()?,
        softmax_b: r.state()?,
    };
    r.done()?;
    if opt != zero_shaped(&OptimizerState::for_params(&params), &opt) {
        return Err(Error::Checkpoint("optimizer state shapes do not match parameters".into()));
    }

    let mut r = Reader::new(need(tags::STEP)?);
    let step = r.u64()?;
    r.done()?;

    Ok((
        Trainer {
            config,
            params,
            opt,
            step,
        },
        vocab,
    ))
}

/// `reference` with the values of `actual` wherever lengths agree, so that
/// equality with `actual` means the shapes match.
fn zero_shaped(reference: &OptimizerState, actual: &OptimizerState) -> OptimizerState {
    fn pick(r: &AdadeltaState, a: &AdadeltaState) -> AdadeltaState {
        if r.len() == a.len() {
            a.clone()
        } else {
            r.clone()
        }
    }
    fn pick_opt(r: &Option<AdadeltaState>, a: &Option<AdadeltaState>) -> Option<AdadeltaState> {
        match (r, a) {
            (Some(r), Some(a)) => Some(pick(r, a)),
            (r, _) => r.clone(),
        }
    }
    fn pick_banks(
        r: &[(AdadeltaState, AdadeltaState)],
        a: &[(AdadeltaState, AdadeltaState)],
    ) -> Vec<(AdadeltaState, AdadeltaState)> {
        if r.len() != a.len() {
            return r.to_vec();
        }
        r.iter()
            .zip(a)
            .map(|((rw, rb), (aw, ab))| (pick(rw, aw), pick(rb, ab)))
            .collect()
    }
    OptimizerState {
        embed_p: pick(&reference.embed_p, &actual.embed_p),
        channel2: pick_opt(&reference.channel2, &actual.channel2),
        groups: pick_opt(&reference.groups, &actual.groups),
        conv_p: pick_banks(&reference.conv_p, &actual.conv_p),
        conv_s: match (&reference.conv_s, &actual.conv_s) {
            (Some(r), Some(a)) => Some(pick_banks(r, a)),
            (r, _) => r.clone(),
        },
        softmax_w: pick(&reference.softmax_w, &actual.softmax_w),
        softmax_b: pick(&reference.softmax_b, &actual.softmax_b),
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Trainer, Vocabulary)> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("empty checkpoint path".into()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
