//! The frozen target model: a small pre-norm decoder-only transformer with
//! fixed sinusoidal positions and an output projection tied to the token
//! embedding table.

use alloc::string::String;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::corpus::{BatchSampler, Chunk, TokenSequence};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{block_forward, check_layout, normal_init, push_block, tiled_positions, BlockLayout, ParamSet};
use crate::optim::{clip_global_norm, Decay, LrSchedule, Optimizer, OptimizerKind};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{CeTarget, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            layers: 2,
            heads: 4,
            context: 64,
            ff_mult: 4,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.context == 0 || self.ff_mult == 0 {
            return Err(Error::Config("model extents must be positive (vocab ≥ 2)".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "heads ({}) must divide d_model ({})",
                self.heads,
                self.d_model
            )));
        }
        Ok(())
    }
}

/// The vocabulary-to-vector map with cached row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F = f32> {
    vectors: RealArray<F>,
    norms: Vec<f64>,
    median_norm: f64,
}

impl<F: Real> EmbeddingTable<F> {
    /// Rejects tables with duplicate rows (minimum pairwise distance 0).
    pub fn new(vectors: RealArray<F>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(shape_err!("embedding table must be a nonempty |V|×d matrix"));
        }
        vectors.check_finite("embedding table")?;
        let v = vectors.rows();
        for i in 0..v {
            for j in i + 1..v {
                if vectors.row(i) == vectors.row(j) {
                    return Err(invalid!("embedding rows {i} and {j} coincide"));
                }
            }
        }
        let norms: Vec<f64> = (0..v)
            .map(|i| vectors.row(i).iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt())
            .collect();
        let median_norm = median(&norms);
        Ok(Self {
            vectors,
            norms,
            median_norm,
        })
    }

    pub fn vectors(&self) -> &RealArray<F> {
        &self.vectors
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn median_norm(&self) -> f64 {
        self.median_norm
    }

    pub fn row(&self, id: usize) -> &[F] {
        self.vectors.row(id)
    }

    /// Embedding sequence for `ids`, one row per position (`T × d`).
    pub fn embed(&self, ids: &[usize]) -> Result<RealArray<F>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (v, d) = (self.vocab_size(), self.dim());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(self.vectors.row(id));
        }
        RealArray::matrix(ids.len(), d, data)
    }

    /// Row-stacked embeddings of several sequences.
    pub fn embed_batch(&self, seqs: &[TokenSequence]) -> Result<RealArray<F>> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
        self.embed(&ids)
    }

    /// Squared L2 distances from `x` to every row, in f64.
    pub fn sq_distances(&self, x: &[F]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|k| {
                self.vectors
                    .row(k)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| {
                        let d = a.f64() - b.f64();
                        d * d
                    })
                    .sum()
            })
            .collect()
    }

    /// Id of the nearest row (ties to the smaller id).
    pub fn nearest(&self, x: &[F]) -> usize {
        let d = self.sq_distances(x);
        let mut best = 0;
        for (k, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = k;
            }
        }
        best
    }

    /// Largest pairwise L2 distance between rows.
    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.vocab_size() {
            for (j, d) in self.sq_distances(self.row(i)).into_iter().enumerate() {
                if j > i {
                    best = best.max(d);
                }
            }
        }
        best.sqrt()
    }
}

/// Exact median (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<F = f32> {
    config: LmConfig,
    params: ParamSet<F>,
    tok_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    frozen: bool,
}

impl<F: Real> TargetModel<F> {
    pub fn new(config: LmConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamSet::new();
        let tok_emb = params.push("tok_emb", normal_init(rng, config.vocab_size, d, 1.0));
        let residual_std = 0.02f64.max(0.5 / (d as f64).sqrt()) / (2.0 * config.layers as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                push_block(
                    &mut params,
                    &alloc::format!("block{l}"),
                    d,
                    d * config.ff_mult,
                    residual_std,
                    rng,
                )
            })
            .collect();
        let lnf_g = params.push("ln_f.gamma", RealArray::full(&[1, d], F::one()));
        let lnf_b = params.push("ln_f.beta", RealArray::zeros(&[1, d]));
        Ok(Self {
            config,
            params,
            tok_emb,
            blocks,
            lnf_g,
            lnf_b,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: LmConfig, params: ParamSet<F>) -> Result<Self> {
        let mut model = Self::new(config, &mut RngStream::new(0, 0))?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<F>> {
        if self.frozen {
            return Err(invalid!("target model is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn cast<G: Real>(&self) -> TargetModel<G> {
        TargetModel {
            config: self.config,
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            frozen: self.frozen,
        }
    }

    pub fn embedding_table(&self) -> Result<EmbeddingTable<F>> {
        EmbeddingTable::new(self.params.value(self.tok_emb).clone())
    }

    pub fn token_embedding_var(&self, vars: &[Var]) -> Var {
        vars[self.tok_emb]
    }

    /// Logits for row-stacked embedding sequences of length `seq_len`.
    /// `vars` are this model's parameters bound on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, seq_len: usize) -> Var {
        let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
        let pe = tape.constant(tiled_positions(n, seq_len, d));
        let mut h = tape.add(x, pe);
        for b in &self.blocks {
            h = block_forward(tape, vars, b, h, self.config.heads, seq_len, true);
        }
        let h = tape.layer_norm(h, vars[self.lnf_g], vars[self.lnf_b]);
        let z = tape.matmul_t(h, vars[self.tok_emb]);
        tape.scale(z, 1.0 / (d as f64).sqrt())
    }

    pub fn check_input(&self, embeddings: &RealArray<F>, seq_len: usize) -> Result<()> {
        if embeddings.shape().len() != 2 || embeddings.cols() != self.config.d_model {
            return Err(shape_err!(
                "embeddings of shape {:?} do not match d_model {}",
                embeddings.shape(),
                self.config.d_model
            ));
        }
        if seq_len == 0 || seq_len > self.config.context || embeddings.rows() % seq_len != 0 {
            return Err(shape_err!(
                "{} rows are not whole sequences of length {} (context {})",
                embeddings.rows(),
                seq_len,
                self.config.context
            ));
        }
        embeddings.check_finite("model input")
    }

    /// Logits (`rows × |V|`) for row-stacked embedding sequences.
    pub fn forward(&self, embeddings: &RealArray<F>, seq_len: usize) -> Result<RealArray<F>> {
        self.check_input(embeddings, seq_len)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(embeddings.clone());
        let z = self.forward_on_tape(&mut tape, &vars, x, seq_len);
        Ok(tape.value(z).clone())
    }

    /// Logits for equal-length token sequences.
    pub fn forward_ids(&self, seqs: &[TokenSequence]) -> Result<RealArray<F>> {
        let t = seqs.first().ok_or(Error::EmptyInput)?.len();
        if seqs.iter().any(|s| s.len() != t) {
            return Err(shape_err!("sequences in a batch must share a length"));
        }
        let x = self.embedding_table()?.embed_batch(seqs)?;
        self.forward(&x, t)
    }

    /// Mean next-token cross-entropy of `chunks` (padding excluded).
    pub fn cross_entropy(&self, chunks: &[Chunk]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in chunks.chunks(16) {
            let seqs: Vec<TokenSequence> = batch.iter().map(|c| c.seq.clone()).collect();
            let z = self.forward_ids(&seqs)?;
            let targets: Vec<Option<usize>> = batch.iter().flat_map(Chunk::targets).collect();
            let n = targets.iter().flatten().count();
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            let l = tape.cross_entropy(zv, CeTarget::Classes(targets));
            total += tape.scalar(l).f64() * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(total / count as f64)
    }

    /// Fraction of non-padding positions whose argmax logit is the next token.
    pub fn top1_accuracy(&self, chunks: &[Chunk]) -> Result<f64> {
        let mut hit = 0usize;
        let mut count = 0usize;
        for batch in chunks.chunks(16) {
            let seqs: Vec<TokenSequence> = batch.iter().map(|c| c.seq.clone()).collect();
            let z = self.forward_ids(&seqs)?;
            let targets: Vec<Option<usize>> = batch.iter().flat_map(Chunk::targets).collect();
            for (r, t) in targets.iter().enumerate() {
                if let Some(y) = t {
                    count += 1;
                    if argmax(z.row(r)) == *y {
                        hit += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(hit as f64 / count as f64)
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 3e-3,
            warmup_frac: 0.05,
            clip: 1.0,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("pretraining lr, clip or warm-up fraction out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_ce: f64,
    pub epoch_ce: Vec<f64>,
    pub steps: usize,
}

/// Next-token pretraining over `chunks`; `on_epoch(epoch, mean_ce)` runs
/// after every epoch. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn pretrain<F: Real>(
    model: &mut TargetModel<F>,
    chunks: &[Chunk],
    cfg: &PretrainConfig,
    rng: &mut RngStream,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    if model.is_frozen() {
        return Err(invalid!("cannot pretrain a frozen model"));
    }
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(Error::EmptyInput);
    }
    let t = chunks[0].seq.len();
    let steps_per_epoch = chunks.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let sched = LrSchedule {
        base: cfg.lr,
        warmup_steps: ((total as f64) * cfg.warmup_frac) as usize,
        total_steps: total,
        decay: Decay::Cosine,
        min_frac: 0.1,
    };
    let index: Vec<TokenSequence> = (0..chunks.len())
        .map(|i| TokenSequence::new(alloc::vec![i], chunks.len(), 1))
        .collect::<Result<_>>()?;
    let bs = cfg.batch_size.min(chunks.len());
    let mut sampler = BatchSampler::new(index, bs, false, rng.child(0))?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let initial_ce = model.cross_entropy(&chunks[..chunks.len().min(64)])?;
    let mut epoch_ce = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let picked: Vec<&Chunk> = sampler
                .next_batch()
                .iter()
                .map(|s| &chunks[s.ids()[0]])
                .collect();
            let ids: Vec<usize> = picked.iter().flat_map(|c| c.seq.ids().iter().copied()).collect();
            let targets: Vec<Option<usize>> = picked.iter().flat_map(|c| c.targets()).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let x = tape.gather(vars[model.tok_emb], &ids);
            let z = model.forward_on_tape(&mut tape, &vars, x, t);
            let loss = tape.cross_entropy(z, CeTarget::Classes(targets));
            let lv = tape.scalar(loss).f64();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: String::from("non-finite pretraining loss"),
                });
            }
            sum += lv;
            let mut grads = tape.backward(loss);
            let mut g: Vec<Option<RealArray<F>>> = vars.iter().map(|v| grads.take(*v)).collect();
            clip_global_norm(&mut g, cfg.clip);
            opt.step(&mut model.params, &g, sched.rate(step))?;
            step += 1;
        }
        let mean = sum / steps_per_epoch as f64;
        on_epoch(epoch, mean);
        epoch_ce.push(mean);
    }
    Ok(PretrainReport {
        initial_ce,
        epoch_ce,
        steps: step,
    })
}
