//! Small pre-normalization transformer encoder producing per-layer token
//! representations.

pub mod checkpoint;
mod mlp;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, ParamVars, Tape, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use mlp::{Activation, Mlp};

/// Standard deviation of every randomly initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

/// Passage limit + question limit + `[BOS]` + `[SEP]`.
pub const MIN_POSITIONS: usize = 456 + 50 + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// d=64, 4 layers, 4 heads, FFN 256, dropout 0.1.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_width: 256,
            max_positions: 512,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_width == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions < MIN_POSITIONS {
            return Err(Error::config(format!(
                "max_positions {} is below the required {MIN_POSITIONS}",
                self.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < 5 {
            return Err(Error::config("vocab_size must cover the reserved tokens"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_width;
        // no key bias: it shifts every score in a row equally and cannot
        // change the attention weights
        let per_layer = 4 * d + 4 * d * d + 3 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_positions * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Where each encoder tensor lives inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    final_g: ParamId,
    final_b: ParamId,
}

/// Encoder configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub encoder: Encoder,
    pub store: ParamStore,
}

/// How dropout is applied during a forward pass.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut dyn RngCore, dropout: f64 },
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &Tape<'_>, x: Var) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train { dropout, .. } if *dropout <= 0.0 => x,
            Mode::Train { rng, dropout } => {
                let keep = 1.0 - *dropout;
                let n = tape.value(x).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.dropout_mask(x, mask)
            }
        }
    }
}

/// Per-layer representations: layer 0 is token + position embedding, layer
/// `n_layers` is the final normalized output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRepresentations {
    pub layers: Vec<Matrix>,
}

impl LayerRepresentations {
    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("at least the embedding layer")
    }

    pub fn layer(&self, i: usize) -> Option<&Matrix> {
        self.layers.get(i)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Train,
    Eval,
}

fn normal(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Matrix::random_normal(rows, cols, INIT_STD, rng))
}

impl Encoder {
    /// Adds freshly initialized encoder tensors to `store` under `prefix`.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width;
        let p = |s: &str| format!("{prefix}{s}");
        let tok_emb = normal(store, p("tok_emb"), config.vocab_size, d, rng);
        let pos_emb = normal(store, p("pos_emb"), config.max_positions, d, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("{prefix}layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: store.add(n("ln1.g"), Matrix::filled(1, d, 1.0)),
                ln1_b: store.add(n("ln1.b"), Matrix::zeros(1, d)),
                wq: normal(store, n("attn.wq"), d, d, rng),
                bq: store.add(n("attn.bq"), Matrix::zeros(1, d)),
                wk: normal(store, n("attn.wk"), d, d, rng),
                wv: normal(store, n("attn.wv"), d, d, rng),
                bv: store.add(n("attn.bv"), Matrix::zeros(1, d)),
                wo: normal(store, n("attn.wo"), d, d, rng),
                bo: store.add(n("attn.bo"), Matrix::zeros(1, d)),
                ln2_g: store.add(n("ln2.g"), Matrix::filled(1, d, 1.0)),
                ln2_b: store.add(n("ln2.b"), Matrix::zeros(1, d)),
                w1: normal(store, n("ffn.w1"), d, f, rng),
                b1: store.add(n("ffn.b1"), Matrix::zeros(1, f)),
                w2: normal(store, n("ffn.w2"), f, d, rng),
                b2: store.add(n("ffn.b2"), Matrix::zeros(1, d)),
            });
        }
        let final_g = store.add(p("final_ln.g"), Matrix::filled(1, d, 1.0));
        let final_b = store.add(p("final_ln.b"), Matrix::zeros(1, d));
        Ok(Self { config: config.clone(), tok_emb, pos_emb, layers, final_g, final_b })
    }

    /// Re-binds an encoder to tensors already present in `store`, checking shapes.
    pub fn bind(config: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width;
        let get = |name: String, rows: usize, cols: usize| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.get(id).shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    (rows, cols)
                )));
            }
            Ok(id)
        };
        let p = |s: &str| format!("{prefix}{s}");
        let tok_emb = get(p("tok_emb"), config.vocab_size, d)?;
        let pos_emb = get(p("pos_emb"), config.max_positions, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("{prefix}layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: get(n("ln1.g"), 1, d)?,
                ln1_b: get(n("ln1.b"), 1, d)?,
                wq: get(n("attn.wq"), d, d)?,
                bq: get(n("attn.bq"), 1, d)?,
                wk: get(n("attn.wk"), d, d)?,
                wv: get(n("attn.wv"), d, d)?,
                bv: get(n("attn.bv"), 1, d)?,
                wo: get(n("attn.wo"), d, d)?,
                bo: get(n("attn.bo"), 1, d)?,
                ln2_g: get(n("ln2.g"), 1, d)?,
                ln2_b: get(n("ln2.b"), 1, d)?,
                w1: get(n("ffn.w1"), d, f)?,
                b1: get(n("ffn.b1"), 1, f)?,
                w2: get(n("ffn.w2"), f, d)?,
                b2: get(n("ffn.b2"), 1, d)?,
            });
        }
        let final_g = get(p("final_ln.g"), 1, d)?;
        let final_b = get(p("final_ln.b"), 1, d)?;
        Ok(Self { config: config.clone(), tok_emb, pos_emb, layers, final_g, final_b })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    pub fn position_embedding_id(&self) -> ParamId {
        self.pos_emb
    }

    /// Records the forward pass on `tape` and returns one handle per layer.
    pub fn forward(
        &self,
        tape: &Tape<'_>,
        vars: &ParamVars,
        ids: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if ids.len() > cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_positions {}",
                ids.len(),
                cfg.max_positions
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(vars.var(self.tok_emb), ids);
        let pos = tape.gather(vars.var(self.pos_emb), &positions);
        let embedded = tape.add(tok, pos);
        let mut outputs = Vec::with_capacity(cfg.n_layers + 1);
        outputs.push(embedded);

        let mut x = mode.dropout(tape, embedded);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let v = |id: ParamId| vars.var(id);
            let h = tape.layer_norm(x, v(layer.ln1_g), v(layer.ln1_b));
            let q = tape.add_row(tape.matmul(h, v(layer.wq)), v(layer.bq));
            let k = tape.matmul(h, v(layer.wk));
            let val = tape.add_row(tape.matmul(h, v(layer.wv)), v(layer.bv));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(val, head * dh, dh);
                let scores = tape.scale(tape.matmul_t(qh, false, kh, true), scale);
                let probs = tape.softmax_rows(scores);
                heads.push(tape.matmul(probs, vh));
            }
            let attn = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let attn = tape.add_row(tape.matmul(attn, v(layer.wo)), v(layer.bo));
            let attn = mode.dropout(tape, attn);
            x = tape.add(x, attn);

            let h = tape.layer_norm(x, v(layer.ln2_g), v(layer.ln2_b));
            let hidden = tape.gelu(tape.add_row(tape.matmul(h, v(layer.w1)), v(layer.b1)));
            let ffn = tape.add_row(tape.matmul(hidden, v(layer.w2)), v(layer.b2));
            let ffn = mode.dropout(tape, ffn);
            x = tape.add(x, ffn);
            outputs.push(x);
        }
        let last = outputs.len() - 1;
        if cfg.n_layers > 0 {
            outputs[last] = tape.layer_norm(outputs[last], vars.var(self.final_g), vars.var(self.final_b));
        }
        Ok(outputs)
    }

    /// Inference helper returning plain matrices.
    pub fn represent(&self, store: &ParamStore, ids: &[usize]) -> Result<LayerRepresentations> {
        let tape = Tape::new();
        let vars = store.register(&tape);
        let outs = self.forward(&tape, &vars, ids, &mut Mode::Eval)?;
        Ok(LayerRepresentations {
            layers: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Deterministic initialization from `(config, seed)`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::init(config, &mut store, "encoder.", &mut rng)?;
    Ok(EncoderParams { encoder, store })
}

/// Encodes `tokens`, returning every layer. `seed` drives dropout in train mode.
pub fn encode(params: &EncoderParams, tokens: &TokenSequence, mode: EncodeMode, seed: u64) -> Result<LayerRepresentations> {
    let tape = Tape::new();
    let vars = params.store.register(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = match mode {
        EncodeMode::Eval => Mode::Eval,
        EncodeMode::Train => Mode::Train { rng: &mut rng, dropout: params.encoder.config.dropout },
    };
    let outs = params.encoder.forward(&tape, &vars, &tokens.indices(), &mut m)?;
    Ok(LayerRepresentations {
        layers: outs.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}
