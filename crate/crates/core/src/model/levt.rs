//! The edit-policy network: a source encoder, up to three decoder backbones
//! and the deletion, placeholder and token heads.

use std::sync::Arc;

use levt_tensor::graph::log_softmax_in_place;
use levt_tensor::nn::{glorot, normal};
use levt_tensor::{AttnLayout, Dropout, Graph, ParamId, ParamStore, Scalar, Tensor, TransformerBlock, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EditPolicy, Head, HeadScores, ModelConfig, PolicyLimits};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocab, NUM_RESERVED, PLH};

/// Encoder states of a batch of sources inside one graph.
#[derive(Clone, Debug)]
pub struct Context {
    pub states: Var,
    pub lengths: Vec<usize>,
}

/// Parameter handles and shapes of the network; the values live in a
/// [`ParamStore`] so the same structure serves 32- and 64-bit stores.
#[derive(Clone, Debug, PartialEq)]
pub struct LevTNet {
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Token embedding `E`, also the token head's output projection.
    pub embed: ParamId,
    pub dec_pos: ParamId,
    pub enc_pos: Option<ParamId>,
    pub encoder: Vec<TransformerBlock>,
    pub backbones: Vec<Vec<TransformerBlock>>,
    /// `A`, 2 × d_model.
    pub del_head: ParamId,
    /// `B`, (k_max + 1) × 2·d_model.
    pub plh_head: ParamId,
}

fn row_starts(lengths: &[usize]) -> Vec<usize> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&l| {
            let s = start;
            start += l;
            s
        })
        .collect()
}

impl LevTNet {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} symbols has no content tokens"
            )));
        }
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let embed = store.add("embed.token", normal(&[vocab_size, d], std, rng));
        let dec_pos = store.add("embed.position", normal(&[config.n_max, d], std, rng));
        let (enc_pos, encoder) = if config.conditional {
            let pos = store.add("encoder.position", normal(&[config.n_max, d], std, rng));
            let blocks = (0..config.n_layers)
                .map(|l| {
                    TransformerBlock::new(
                        store,
                        &format!("encoder.{l}"),
                        d,
                        config.d_hidden,
                        config.n_heads,
                        false,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            (Some(pos), blocks)
        } else {
            (None, Vec::new())
        };
        let backbones = (0..config.sharing.backbones())
            .map(|b| {
                (0..config.n_layers)
                    .map(|l| {
                        TransformerBlock::new(
                            store,
                            &format!("decoder{b}.{l}"),
                            d,
                            config.d_hidden,
                            config.n_heads,
                            config.conditional,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let del_head = store.add("head.deletion", glorot(2, d, rng));
        let plh_head = store.add("head.placeholder", glorot(config.k_max + 1, 2 * d, rng));
        Ok(Self {
            config: config.clone(),
            vocab_size,
            embed,
            dec_pos,
            enc_pos,
            encoder,
            backbones,
            del_head,
            plh_head,
        })
    }

    /// `E[y_i] + P[i]` for every position of every sequence, stacked.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<'_, S>, seqs: &[&[TokenId]], pos: ParamId) -> Result<Var> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            if s.len() > self.config.n_max {
                return Err(Error::Length {
                    len: s.len(),
                    max: self.config.n_max,
                });
            }
            for (i, &t) in s.iter().enumerate() {
                if t as usize >= self.vocab_size {
                    return Err(Error::Config(format!(
                        "token id {t} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
                tokens.push(t as usize);
                positions.push(i);
            }
        }
        let e = g.param(self.embed);
        let p = g.param(pos);
        let te = g.gather_rows(e, &tokens)?;
        let pe = g.gather_rows(p, &positions)?;
        Ok(g.add(te, pe)?)
    }

    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        sources: &[&[TokenId]],
        dropout: &mut Dropout<'_>,
    ) -> Result<Context> {
        let pos = self
            .enc_pos
            .ok_or_else(|| Error::Config("unconditional model has no source encoder".into()))?;
        let lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let mut h = self.embed(g, sources, pos)?;
        h = dropout.apply(g, h);
        let layout = Arc::new(AttnLayout::self_attention(&lengths, false));
        for block in &self.encoder {
            h = block.forward(g, h, &layout, None, dropout)?;
        }
        Ok(Context { states: h, lengths })
    }

    /// Hidden states after `upto` blocks of backbone `backbone`; `upto = 0`
    /// gives the embedding layer.
    pub fn decoder_states<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        ys: &[&[TokenId]],
        ctx: Option<&Context>,
        upto: usize,
        backbone: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        if upto > self.config.n_layers || backbone >= self.backbones.len() {
            return Err(Error::Config(format!(
                "decoder depth {upto} / backbone {backbone} out of range"
            )));
        }
        if self.config.conditional != ctx.is_some() {
            return Err(Error::Config(
                "source context must be given exactly for conditional models".into(),
            ));
        }
        let lengths: Vec<usize> = ys.iter().map(|s| s.len()).collect();
        if let Some(c) = ctx {
            if c.lengths.len() != ys.len() {
                return Err(Error::Config(format!(
                    "{} sources for {} target sequences",
                    c.lengths.len(),
                    ys.len()
                )));
            }
        }
        let mut h = self.embed(g, ys, self.dec_pos)?;
        if upto == 0 {
            return Ok(h);
        }
        h = dropout.apply(g, h);
        let layout = Arc::new(AttnLayout::self_attention(&lengths, false));
        let cross = ctx.map(|c| (c.states, Arc::new(AttnLayout::cross(&lengths, &c.lengths))));
        for block in &self.backbones[backbone][..upto] {
            h = block.forward(g, h, &layout, cross.as_ref().map(|(v, l)| (*v, l)), dropout)?;
        }
        Ok(h)
    }

    /// Logits over `[keep, delete]` for every interior position.
    pub fn deletion_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var, ys: &[&[TokenId]]) -> Result<Var> {
        let lens: Vec<usize> = ys.iter().map(|s| s.len()).collect();
        let rows: Vec<usize> = row_starts(&lens)
            .into_iter()
            .zip(&lens)
            .flat_map(|(o, &n)| (1..n - 1).map(move |i| o + i))
            .collect();
        let x = g.gather_rows(h, &rows)?;
        let a = g.param(self.del_head);
        Ok(g.matmul_nt(x, a)?)
    }

    /// Logits over `0..=k_max` for every adjacent pair `(i, i + 1)`.
    pub fn placeholder_logits<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        ys: &[&[TokenId]],
    ) -> Result<Var> {
        let lens: Vec<usize> = ys.iter().map(|s| s.len()).collect();
        let mut left = Vec::new();
        for (o, &n) in row_starts(&lens).into_iter().zip(&lens) {
            left.extend((0..n - 1).map(|i| o + i));
        }
        let right: Vec<usize> = left.iter().map(|r| r + 1).collect();
        let l = g.gather_rows(h, &left)?;
        let r = g.gather_rows(h, &right)?;
        let pair = g.concat_cols(l, r)?;
        let b = g.param(self.plh_head);
        Ok(g.matmul_nt(pair, b)?)
    }

    /// Vocabulary logits `h_i · Eᵀ` at every placeholder position.
    pub fn token_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var, ys: &[&[TokenId]]) -> Result<Var> {
        let lens: Vec<usize> = ys.iter().map(|s| s.len()).collect();
        let rows: Vec<usize> = row_starts(&lens)
            .into_iter()
            .zip(ys)
            .flat_map(|(o, s)| {
                s.iter()
                    .enumerate()
                    .filter(|(_, &t)| t == PLH)
                    .map(move |(i, _)| o + i)
            })
            .collect();
        let x = g.gather_rows(h, &rows)?;
        let e = g.param(self.embed);
        Ok(g.matmul_nt(x, e)?)
    }

    /// States feeding `head` at the configured depth.
    pub fn head_states<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        head: Head,
        ys: &[&[TokenId]],
        ctx: Option<&Context>,
        depth: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let upto = match head {
            Head::Token => self.config.n_layers,
            _ => depth,
        };
        self.decoder_states(g, ys, ctx, upto, self.config.sharing.backbone(head), dropout)
    }
}

pub(crate) fn id_slices(seqs: &[TokenSeq]) -> Vec<&[TokenId]> {
    seqs.iter().map(TokenSeq::ids).collect()
}

/// A network together with its 32-bit parameters and vocabulary.
#[derive(Clone, Debug)]
pub struct LevT {
    pub net: LevTNet,
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
}

impl LevT {
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = LevTNet::build(config, vocab.len(), &mut params, &mut rng)?;
        Ok(Self { net, params, vocab })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Deep copy with a different early-exit setting; parameters unchanged.
    pub fn with_early_exit(&self, early_exit: super::EarlyExit) -> Result<Self> {
        let mut m = self.clone();
        m.net.config.early_exit = Some(early_exit);
        m.net.config.validate()?;
        Ok(m)
    }

    fn context_for(
        &self,
        g: &mut Graph<'_, f32>,
        ctx: &[Tensor<f32>],
        sources: &[usize],
    ) -> Result<Option<Context>> {
        if !self.net.config.conditional {
            return Ok(None);
        }
        let d = self.net.config.d_model;
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(sources.len());
        for &s in sources {
            let t = ctx
                .get(s)
                .ok_or_else(|| Error::Config(format!("source index {s} outside prepared context")))?;
            data.extend_from_slice(t.data());
            lengths.push(t.shape()[0]);
        }
        let rows = data.len() / d;
        let states = g.constant(Tensor::new(vec![rows, d], data)?);
        Ok(Some(Context { states, lengths }))
    }

    fn scores(
        &self,
        ctx: &[Tensor<f32>],
        sources: &[usize],
        ys: &[TokenSeq],
        head: Head,
        depth: usize,
    ) -> Result<HeadScores> {
        let mut g = Graph::with_params(&self.params);
        let context = self.context_for(&mut g, ctx, sources)?;
        let ids = id_slices(ys);
        let h = self
            .net
            .head_states(&mut g, head, &ids, context.as_ref(), depth, &mut Dropout::off())?;
        let logits = match head {
            Head::Deletion => self.net.deletion_logits(&mut g, h, &ids)?,
            Head::Placeholder => self.net.placeholder_logits(&mut g, h, &ids)?,
            Head::Token => self.net.token_logits(&mut g, h, &ids)?,
        };
        let t = g.value(logits);
        let width = t.shape()[1];
        let mut data = t.data().to_vec();
        data.chunks_mut(width).for_each(log_softmax_in_place);
        let mut offsets = vec![0];
        for y in ys {
            let n = match head {
                Head::Deletion => y.len() - 2,
                Head::Placeholder => y.len() - 1,
                Head::Token => y.placeholder_count(),
            };
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(HeadScores { width, data, offsets })
    }
}

impl EditPolicy for LevT {
    /// Encoder states per source.
    type Context = Vec<Tensor<f32>>;

    fn limits(&self) -> PolicyLimits {
        let c = &self.net.config;
        PolicyLimits {
            k_max: c.k_max,
            n_max: c.n_max,
            vocab_size: self.net.vocab_size,
            n_layers: c.n_layers,
            early_exit: c.early_exit(),
        }
    }

    fn prepare(&self, sources: Option<&[TokenSeq]>) -> Result<Self::Context> {
        let sources = match (self.net.config.conditional, sources) {
            (false, _) => return Ok(Vec::new()),
            (true, None) => return Err(Error::Config("conditional model needs source sequences".into())),
            (true, Some(s)) => s,
        };
        let mut out = Vec::with_capacity(sources.len());
        // Chunked so that a large corpus does not build one huge graph.
        for chunk in sources.chunks(256) {
            let mut g = Graph::with_params(&self.params);
            let ctx = self.net.encode(&mut g, &id_slices(chunk), &mut Dropout::off())?;
            let states = g.value(ctx.states);
            let d = self.net.config.d_model;
            let mut start = 0;
            for &n in &ctx.lengths {
                let rows = states.data()[start * d..(start + n) * d].to_vec();
                out.push(Tensor::new(vec![n, d], rows)?);
                start += n;
            }
        }
        Ok(out)
    }

    fn deletion_scores(
        &self,
        ctx: &Self::Context,
        sources: &[usize],
        ys: &[TokenSeq],
        depth: usize,
    ) -> Result<HeadScores> {
        self.scores(ctx, sources, ys, Head::Deletion, depth)
    }

    fn placeholder_scores(
        &self,
        ctx: &Self::Context,
        sources: &[usize],
        ys: &[TokenSeq],
        depth: usize,
    ) -> Result<HeadScores> {
        self.scores(ctx, sources, ys, Head::Placeholder, depth)
    }

    fn token_scores(&self, ctx: &Self::Context, sources: &[usize], ys: &[TokenSeq]) -> Result<HeadScores> {
        self.scores(ctx, sources, ys, Head::Token, self.net.config.n_layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SharingMode;

    fn tiny(sharing: SharingMode) -> LevT {
        let vocab = Vocab::build(["a b c d e f"], 1).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            d_hidden: 16,
            n_heads: 2,
            n_layers: 2,
            k_max: 3,
            n_max: 16,
            sharing,
            ..ModelConfig::default()
        };
        LevT::new(&cfg, vocab, 1).unwrap()
    }

    #[test]
    fn head_row_counts_and_normalisation() {
        let m = tiny(SharingMode::All);
        let ys = vec![
            m.vocab.encode("a b c").unwrap(),
            TokenSeq::from_interior(&[PLH, 5, PLH]).unwrap(),
            TokenSeq::empty(),
        ];
        let srcs = vec![m.vocab.encode("a").unwrap(); 3];
        let ctx = m.prepare(Some(&srcs)).unwrap();
        let idx = [0, 1, 2];
        let del = m.deletion_scores(&ctx, &idx, &ys, 2).unwrap();
        assert_eq!(del.offsets, vec![0, 3, 6, 6]);
        let plh = m.placeholder_scores(&ctx, &idx, &ys, 2).unwrap();
        assert_eq!(plh.offsets, vec![0, 4, 8, 9]);
        assert_eq!(plh.width, 4);
        let tok = m.token_scores(&ctx, &idx, &ys).unwrap();
        assert_eq!(tok.offsets, vec![0, 0, 2, 2]);
        assert_eq!(tok.width, m.vocab.len());
        for s in [&del, &plh, &tok] {
            for row in s.data.chunks(s.width) {
                let total: f32 = row.iter().map(|x| x.exp()).sum();
                assert!((total - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parameter_counts_by_sharing_mode() {
        let all = tiny(SharingMode::All);
        let none = tiny(SharingMode::None);
        let backbone = |m: &LevT| {
            m.params
                .iter()
                .filter(|(_, n, _)| n.starts_with("decoder"))
                .map(|(_, _, t)| t.numel())
                .sum::<usize>()
        };
        assert_eq!(backbone(&none), 3 * backbone(&all));
        assert_eq!(all.net.backbones.len(), 1);
        assert_eq!(
            all.params.get(all.net.plh_head).shape(),
            none.params.get(none.net.plh_head).shape()
        );
    }

    #[test]
    fn too_long_sequence_is_a_length_error() {
        let m = tiny(SharingMode::All);
        let y = TokenSeq::from_interior(&[5; 20]).unwrap();
        let ctx = m.prepare(Some(&[TokenSeq::empty()])).unwrap();
        assert!(matches!(
            m.deletion_scores(&ctx, &[0], &[y], 2),
            Err(Error::Length { .. })
        ));
    }
}
