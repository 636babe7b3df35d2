//! Encoder/decoder composition of set blocks.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{PoolKind, Tape, Var};
use crate::blocks::{self, IsabParams, Linear, MabParams, PmaParams};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderBlock {
    /// `FC(d, ReLU)`.
    Fc,
    /// `FC(d, -)`.
    Linear,
    /// `FC(d, -)` followed by the equivariant layer with mean pooling.
    RffpMean,
    /// `FC(d, -)` followed by the equivariant layer with max pooling.
    RffpMax,
    Sab,
    Isab(usize),
}

impl fmt::Display for EncoderBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderBlock::Fc => f.write_str("fc"),
            EncoderBlock::Linear => f.write_str("linear"),
            EncoderBlock::RffpMean => f.write_str("rffp-mean"),
            EncoderBlock::RffpMax => f.write_str("rffp-max"),
            EncoderBlock::Sab => f.write_str("sab"),
            EncoderBlock::Isab(m) => write!(f, "isab:{m}"),
        }
    }
}

impl FromStr for EncoderBlock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "fc" => EncoderBlock::Fc,
            "linear" => EncoderBlock::Linear,
            "rffp-mean" => EncoderBlock::RffpMean,
            "rffp-max" => EncoderBlock::RffpMax,
            "sab" => EncoderBlock::Sab,
            other => match other.strip_prefix("isab:") {
                Some(m) => EncoderBlock::Isab(
                    m.parse()
                        .map_err(|_| Error::Config(format!("bad inducing point count in `{other}`")))?,
                ),
                None => return Err(Error::Config(format!("unknown encoder block `{other}`"))),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
    Max,
    Dotprod,
    Pma(usize),
}

impl Pooling {
    /// Rows produced per set.
    pub fn rows(self) -> usize {
        match self {
            Pooling::Pma(k) => k,
            _ => 1,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::Mean => f.write_str("mean"),
            Pooling::Sum => f.write_str("sum"),
            Pooling::Max => f.write_str("max"),
            Pooling::Dotprod => f.write_str("dotprod"),
            Pooling::Pma(k) => write!(f, "pma:{k}"),
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "mean" => Pooling::Mean,
            "sum" => Pooling::Sum,
            "max" => Pooling::Max,
            "dotprod" => Pooling::Dotprod,
            other => match other.strip_prefix("pma:") {
                Some(k) => Pooling::Pma(
                    k.parse()
                        .map_err(|_| Error::Config(format!("bad seed count in `{other}`")))?,
                ),
                None => return Err(Error::Config(format!("unknown pooling `{other}`"))),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub pooling: Pooling,
    /// SABs applied to the pooled rows.
    pub post_sabs: usize,
    /// Row-wise `FC(d, ReLU)` in front of PMA.
    pub pma_rff: bool,
    /// Widths of the `FC(w, ReLU)` layers of the output head.
    pub hidden: Vec<usize>,
    /// Width of the final linear layer.
    pub output_dim: usize,
    /// Rows of the per-set output after the row-major reshape.
    pub output_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.input_dim == 0 || e.dim == 0 {
            return Err(Error::Config("input_dim and model_dim must be positive".into()));
        }
        if e.heads == 0 || e.dim % e.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                e.dim, e.heads
            )));
        }
        if e.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if e.blocks.iter().any(|b| *b == EncoderBlock::Isab(0)) {
            return Err(Error::Config("ISAB needs m >= 1".into()));
        }
        if d.pooling == Pooling::Pma(0) {
            return Err(Error::Config("PMA needs k >= 1".into()));
        }
        if d.pma_rff && !matches!(d.pooling, Pooling::Pma(_)) {
            return Err(Error::Config("pma_rff requires PMA pooling".into()));
        }
        if d.output_dim == 0 || d.output_rows == 0 || d.hidden.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let total = d.pooling.rows() * d.output_dim;
        if total % d.output_rows != 0 {
            return Err(Error::Config(format!(
                "{} pooled rows x output_dim {} cannot be reshaped into {} rows",
                d.pooling.rows(),
                d.output_dim,
                d.output_rows
            )));
        }
        Ok(())
    }

    /// Per-set output shape.
    pub fn output_shape(&self) -> (usize, usize) {
        let d = &self.decoder;
        (d.output_rows, d.pooling.rows() * d.output_dim / d.output_rows)
    }
}

#[derive(Clone, Debug)]
enum EncLayer {
    Fc(Linear, bool),
    Rffp {
        fc: Linear,
        lambda: ParamId,
        gamma: ParamId,
        pool: PoolKind,
    },
    Sab(MabParams),
    Isab(IsabParams),
}

#[derive(Clone, Debug)]
enum PoolLayer {
    Simple(PoolKind),
    Dotprod(ParamId),
    Pma(PmaParams),
}

/// A permutation-invariant set model: encoder, pooling, post-pooling SABs,
/// and a row-wise output head.
#[derive(Clone, Debug)]
pub struct SetModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<EncLayer>,
    pool: PoolLayer,
    post: Vec<MabParams>,
    head: Vec<Linear>,
}

impl SetModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let d = e.dim;
        let mut d_in = e.input_dim;
        let mut encoder = Vec::new();
        for (i, block) in e.blocks.iter().enumerate() {
            let name = format!("enc{i}");
            let layer = match *block {
                EncoderBlock::Fc => EncLayer::Fc(Linear::new(&mut store, &name, d_in, d, true, rng)?, true),
                EncoderBlock::Linear => EncLayer::Fc(Linear::new(&mut store, &name, d_in, d, true, rng)?, false),
                EncoderBlock::RffpMean | EncoderBlock::RffpMax => EncLayer::Rffp {
                    fc: Linear::new(&mut store, &name, d_in, d, true, rng)?,
                    lambda: store.add(format!("{name}.lambda"), Tensor::scalar(1.0))?,
                    gamma: store.add(format!("{name}.gamma"), Tensor::scalar(0.0))?,
                    pool: if *block == EncoderBlock::RffpMean {
                        PoolKind::Mean
                    } else {
                        PoolKind::Max
                    },
                },
                EncoderBlock::Sab => EncLayer::Sab(MabParams::new(&mut store, &name, d_in, d_in, d, e.heads, rng)?),
                EncoderBlock::Isab(m) => EncLayer::Isab(IsabParams::new(&mut store, &name, d_in, d, e.heads, m, rng)?),
            };
            encoder.push(layer);
            d_in = d;
        }
        let dc = &config.decoder;
        let pool = match dc.pooling {
            Pooling::Mean => PoolLayer::Simple(PoolKind::Mean),
            Pooling::Sum => PoolLayer::Simple(PoolKind::Sum),
            Pooling::Max => PoolLayer::Simple(PoolKind::Max),
            Pooling::Dotprod => PoolLayer::Dotprod(store.add("dec.dotprod.w", blocks::scaled_normal(1, d, rng))?),
            Pooling::Pma(k) => PoolLayer::Pma(PmaParams::new(&mut store, "dec.pma", d, e.heads, k, dc.pma_rff, rng)?),
        };
        let post = (0..dc.post_sabs)
            .map(|i| MabParams::new(&mut store, &format!("dec.sab{i}"), d, d, d, e.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut head = Vec::new();
        let mut w_in = d;
        for (i, &w) in dc.hidden.iter().enumerate() {
            head.push(Linear::new(&mut store, &format!("dec.fc{i}"), w_in, w, true, rng)?);
            w_in = w;
        }
        head.push(Linear::new(&mut store, "dec.out", w_in, dc.output_dim, true, rng)?);
        Ok(Self {
            config,
            store,
            encoder,
            pool,
            post,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `Encoder(X)`: `(groups*n) x input_dim -> (groups*n) x d`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: &Var, groups: usize) -> Result<Var> {
        if x.cols() != self.config.encoder.input_dim {
            return Err(Error::Dimension {
                op: "encode",
                lhs: x.shape(),
                rhs: (x.rows(), self.config.encoder.input_dim),
            });
        }
        if groups == 0 || x.rows() % groups != 0 || x.rows() == 0 {
            return Err(Error::Contract(format!(
                "{} rows cannot be split into {groups} nonempty sets",
                x.rows()
            )));
        }
        let mut h = x.clone();
        for layer in &self.encoder {
            h = match layer {
                EncLayer::Fc(fc, relu) => {
                    let y = fc.forward(tape, p, &h)?;
                    if *relu {
                        tape.relu(&y)
                    } else {
                        y
                    }
                }
                EncLayer::Rffp { fc, lambda, gamma, pool } => {
                    let y = fc.forward(tape, p, &h)?;
                    blocks::rffp_layer(tape, &y, &p[*lambda], &p[*gamma], *pool, groups)?
                }
                EncLayer::Sab(params) => blocks::sab(tape, p, &h, params, groups)?,
                EncLayer::Isab(params) => blocks::isab(tape, p, &h, params, groups)?,
            };
        }
        Ok(h)
    }

    /// `Decoder(Z)`: `(groups*n) x d -> (groups*rows) x cols` with
    /// `(rows, cols) = config.output_shape()`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, z: &Var, groups: usize) -> Result<Var> {
        let mut h = match &self.pool {
            PoolLayer::Simple(kind) => tape.pool_rows(z, groups, *kind)?,
            PoolLayer::Dotprod(w) => blocks::dotprod_pool(tape, z, &p[*w], groups)?,
            PoolLayer::Pma(params) => blocks::pma(tape, p, z, params, groups)?,
        };
        for params in &self.post {
            h = blocks::sab(tape, p, &h, params, groups)?;
        }
        let last = self.head.len() - 1;
        for (i, fc) in self.head.iter().enumerate() {
            h = fc.forward(tape, p, &h)?;
            if i < last {
                h = tape.relu(&h);
            }
        }
        let (rows, cols) = self.config.output_shape();
        if (rows, cols) != (self.config.decoder.pooling.rows(), self.config.decoder.output_dim) {
            h = tape.reshape(&h, groups * rows, cols)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Var, groups: usize) -> Result<Var> {
        let z = self.encode(tape, p, x, groups)?;
        self.decode(tape, p, &z, groups)
    }

    /// Forward pass on a non-recording tape.
    pub fn predict(&self, x: &Tensor, groups: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, &xv, groups)?;
        Ok(out.value().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(blocks: Vec<EncoderBlock>, pooling: Pooling) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: 2,
                dim: 8,
                heads: 2,
                blocks,
            },
            decoder: DecoderConfig {
                pooling,
                post_sabs: 0,
                pma_rff: false,
                hidden: vec![],
                output_dim: 3,
                output_rows: pooling.rows(),
            },
        }
    }

    #[test]
    fn block_and_pooling_names_round_trip() {
        for b in [
            EncoderBlock::Fc,
            EncoderBlock::Linear,
            EncoderBlock::RffpMean,
            EncoderBlock::RffpMax,
            EncoderBlock::Sab,
            EncoderBlock::Isab(16),
        ] {
            assert_eq!(b.to_string().parse::<EncoderBlock>().unwrap(), b);
        }
        for p in [Pooling::Mean, Pooling::Sum, Pooling::Max, Pooling::Dotprod, Pooling::Pma(4)] {
            assert_eq!(p.to_string().parse::<Pooling>().unwrap(), p);
        }
        assert!("isab:x".parse::<EncoderBlock>().is_err());
        assert!("median".parse::<Pooling>().is_err());
    }

    #[test]
    fn validation_catches_inconsistent_configs() {
        let mut c = cfg(vec![EncoderBlock::Sab], Pooling::Mean);
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(vec![], Pooling::Mean);
        assert!(c.validate().is_err());
        c.encoder.blocks = vec![EncoderBlock::Fc];
        c.decoder.output_rows = 2;
        assert!(c.validate().is_err());
        c.decoder.output_rows = 1;
        c.decoder.pma_rff = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn two_sab_encoder_is_composition() {
        let mut rng = Rng::new(11);
        let model = SetModel::new(
            ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 8,
                    dim: 8,
                    heads: 2,
                    blocks: vec![EncoderBlock::Sab, EncoderBlock::Sab],
                },
                ..cfg(vec![], Pooling::Mean)
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_fn(5, 8, |_, _| rng.normal());
        let mut tape = Tape::inference();
        let p = model.params().bind(&mut tape);
        let xv = tape.constant(x);
        let z = model.encode(&mut tape, &p, &xv, 1).unwrap();
        let EncLayer::Sab(a) = &model.encoder[0] else { panic!() };
        let EncLayer::Sab(b) = &model.encoder[1] else { panic!() };
        let h = blocks::sab(&mut tape, &p, &xv, a, 1).unwrap();
        let h = blocks::sab(&mut tape, &p, &h, b, 1).unwrap();
        assert_eq!(z.value(), h.value());
    }

    #[test]
    fn flat_head_is_reshaped_per_set() {
        let mut rng = Rng::new(12);
        let mut c = cfg(vec![EncoderBlock::Fc], Pooling::Mean);
        c.decoder.output_dim = 20;
        c.decoder.output_rows = 4;
        let model = SetModel::new(c, &mut rng).unwrap();
        let x = Tensor::from_fn(3 * 7, 2, |_, _| rng.normal());
        let out = model.predict(&x, 3).unwrap();
        assert_eq!(out.shape(), (12, 5));
    }

    #[test]
    fn every_pooling_kind_runs() {
        let mut rng = Rng::new(13);
        for pooling in [Pooling::Mean, Pooling::Sum, Pooling::Max, Pooling::Dotprod, Pooling::Pma(3)] {
            for block in [
                EncoderBlock::Fc,
                EncoderBlock::RffpMean,
                EncoderBlock::RffpMax,
                EncoderBlock::Sab,
                EncoderBlock::Isab(4),
            ] {
                let model = SetModel::new(cfg(vec![block, EncoderBlock::Linear], pooling), &mut rng).unwrap();
                let x = Tensor::from_fn(2 * 6, 2, |_, _| rng.normal());
                let out = model.predict(&x, 2).unwrap();
                assert_eq!(out.shape(), (2 * pooling.rows(), 3));
                assert!(out.all_finite());
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = Rng::new(14);
        let model = SetModel::new(cfg(vec![EncoderBlock::Sab], Pooling::Mean), &mut rng).unwrap();
        assert!(model.predict(&Tensor::zeros(4, 3), 1).is_err());
        assert!(model.predict(&Tensor::zeros(5, 2), 2).is_err());
    }
}
