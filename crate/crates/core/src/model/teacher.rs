//! Left-to-right encoder-decoder used as a distillation teacher.

use std::cmp::Ordering;
use std::sync::Arc;

use levt_tensor::graph::log_softmax_in_place;
use levt_tensor::nn::normal;
use levt_tensor::{AttnLayout, Dropout, Graph, ParamId, ParamStore, Scalar, Tensor, TransformerBlock, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::levt::{id_slices, Context};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocab, BOS, EOS, NUM_RESERVED, PAD, PLH};

#[derive(Clone, Debug, PartialEq)]
pub struct ArNet {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub encoder: Vec<TransformerBlock>,
    pub decoder: Vec<TransformerBlock>,
}

impl ArNet {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if !config.conditional {
            return Err(Error::Config("the teacher needs a source encoder".into()));
        }
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let embed = store.add("embed.token", normal(&[vocab_size, d], std, rng));
        let enc_pos = store.add("encoder.position", normal(&[config.n_max, d], std, rng));
        let dec_pos = store.add("embed.position", normal(&[config.n_max, d], std, rng));
        let mut stack = |prefix: &str, cross: bool| {
            (0..config.n_layers)
                .map(|l| {
                    TransformerBlock::new(
                        store,
                        &format!("{prefix}.{l}"),
                        d,
                        config.d_hidden,
                        config.n_heads,
                        cross,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let encoder = stack("encoder", false)?;
        let decoder = stack("decoder", true)?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            embed,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
        })
    }

    fn embed<S: Scalar>(&self, g: &mut Graph<'_, S>, seqs: &[&[TokenId]], pos: ParamId) -> Result<Var> {
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
                    return Err(Error::Config(format!("token id {t} outside vocabulary")));
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
        let lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let mut h = self.embed(g, sources, self.enc_pos)?;
        h = dropout.apply(g, h);
        let layout = Arc::new(AttnLayout::self_attention(&lengths, false));
        for block in &self.encoder {
            h = block.forward(g, h, &layout, None, dropout)?;
        }
        Ok(Context { states: h, lengths })
    }

    /// Causal decoder states for every prefix position.
    pub fn decode_states<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        prefixes: &[&[TokenId]],
        ctx: &Context,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let lengths: Vec<usize> = prefixes.iter().map(|s| s.len()).collect();
        let mut h = self.embed(g, prefixes, self.dec_pos)?;
        h = dropout.apply(g, h);
        let layout = Arc::new(AttnLayout::self_attention(&lengths, true));
        let cross = Arc::new(AttnLayout::cross(&lengths, &ctx.lengths));
        for block in &self.decoder {
            h = block.forward(g, h, &layout, Some((ctx.states, &cross)), dropout)?;
        }
        Ok(h)
    }

    pub fn output_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
        let e = g.param(self.embed);
        Ok(g.matmul_nt(h, e)?)
    }

    /// Teacher-forced next-token cross-entropy.
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        sources: &[TokenSeq],
        targets: &[TokenSeq],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let ctx = self.encode(g, &id_slices(sources), dropout)?;
        let inputs: Vec<&[TokenId]> = targets.iter().map(|t| &t.ids()[..t.len() - 1]).collect();
        let gold: Vec<usize> = targets
            .iter()
            .flat_map(|t| t.ids()[1..].iter().map(|&x| x as usize))
            .collect();
        let h = self.decode_states(g, &inputs, &ctx, dropout)?;
        let logits = self.output_logits(g, h)?;
        Ok(g.cross_entropy(logits, &gold, self.config.label_smoothing)?)
    }
}

/// Ids the teacher never emits.
fn masked(id: usize) -> bool {
    id == PAD as usize || id == BOS as usize || id == PLH as usize
}

#[derive(Clone, Debug)]
pub struct ArTeacher {
    pub net: ArNet,
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
}

#[derive(Clone, Debug)]
struct Hyp {
    ids: Vec<TokenId>,
    score: f64,
}

impl ArTeacher {
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ArNet::build(config, vocab.len(), &mut params, &mut rng)?;
        Ok(Self { net, params, vocab })
    }

    fn encode_all(&self, sources: &[TokenSeq]) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::with_params(&self.params);
        let ctx = self
            .net
            .encode(&mut g, &id_slices(sources), &mut Dropout::off())?;
        let states = g.value(ctx.states);
        let d = self.net.config.d_model;
        let mut out = Vec::new();
        let mut start = 0;
        for &n in &ctx.lengths {
            out.push(Tensor::new(
                vec![n, d],
                states.data()[start * d..(start + n) * d].to_vec(),
            )?);
            start += n;
        }
        Ok(out)
    }

    /// Masked next-token log-probabilities for each `(source, prefix)` pair.
    fn next_log_probs(
        &self,
        encoded: &[Tensor<f32>],
        which: &[usize],
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f32>>> {
        let d = self.net.config.d_model;
        let mut g = Graph::with_params(&self.params);
        let mut data = Vec::new();
        let mut lengths = Vec::new();
        for &s in which {
            data.extend_from_slice(encoded[s].data());
            lengths.push(encoded[s].shape()[0]);
        }
        let rows = data.len() / d;
        let states = g.constant(Tensor::new(vec![rows, d], data)?);
        let ctx = Context { states, lengths };
        let h = self
            .net
            .decode_states(&mut g, prefixes, &ctx, &mut Dropout::off())?;
        let mut last = Vec::with_capacity(prefixes.len());
        let mut start = 0;
        for p in prefixes {
            start += p.len();
            last.push(start - 1);
        }
        let h_last = g.gather_rows(h, &last)?;
        let logits = self.net.output_logits(&mut g, h_last)?;
        let v = self.net.vocab_size;
        Ok(g.value(logits)
            .data()
            .chunks(v)
            .map(|row| {
                let mut r: Vec<f32> = row
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if masked(i) { f32::NEG_INFINITY } else { x })
                    .collect();
                log_softmax_in_place(&mut r);
                r
            })
            .collect())
    }

    /// Next-token log-probabilities given a source and a `<s>`-initial prefix.
    pub fn step(&self, source: &TokenSeq, prefix: &[TokenId]) -> Result<Vec<f32>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Sequence("prefix must start with <s>".into()));
        }
        let enc = self.encode_all(std::slice::from_ref(source))?;
        Ok(self.next_log_probs(&enc, &[0], &[prefix])?.remove(0))
    }

    fn interior_cap(&self, max_len: usize) -> usize {
        max_len.min(self.net.config.n_max - 2)
    }

    /// Left-to-right argmax decoding; ties go to the lowest id.
    pub fn greedy_decode(&self, source: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
        let enc = self.encode_all(std::slice::from_ref(source))?;
        let cap = self.interior_cap(max_len);
        let mut ids = vec![BOS];
        while ids.len() <= cap {
            let lp = self.next_log_probs(&enc, &[0], &[&ids])?.remove(0);
            let best = argmax(&lp);
            if best == EOS as usize {
                break;
            }
            ids.push(best as TokenId);
        }
        ids.push(EOS);
        TokenSeq::new(ids)
    }

    /// Beam search by summed log-probability over a batch of sources; see
    /// [`beam_search`].
    pub fn beam_decode(&self, sources: &[TokenSeq], beam: usize, max_len: usize) -> Result<Vec<TokenSeq>> {
        let cap = self.interior_cap(max_len);
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(64) {
            let enc = self.encode_all(chunk)?;
            out.extend(beam_search(chunk.len(), beam, cap, |which, prefixes| {
                self.next_log_probs(&enc, which, prefixes)
            })?);
        }
        Ok(out)
    }
}

/// Beam search over `batch` independent inputs with at most `cap` interior
/// tokens. `next` maps `(input index, <s>-initial prefix)` pairs to
/// next-token log-probabilities; `-inf` entries are never chosen.
///
/// Among the best `beam` expansions of a step, those ending in `</s>` are
/// completed and the rest stay alive. An input stops once no live hypothesis
/// can still beat the best complete one; scores only fall as hypotheses
/// grow, so stopping never discards a better completion.
pub fn beam_search<F>(batch: usize, beam: usize, cap: usize, mut next: F) -> Result<Vec<TokenSeq>>
where
    F: FnMut(&[usize], &[&[TokenId]]) -> Result<Vec<Vec<f32>>>,
{
    if beam == 0 {
        return Err(Error::Usage("beam size must be positive".into()));
    }
    let mut alive: Vec<Vec<Hyp>> = vec![
        vec![Hyp {
            ids: vec![BOS],
            score: 0.0
        }];
        batch
    ];
    let mut done: Vec<Vec<Hyp>> = vec![Vec::new(); batch];
    for step in 0..=cap {
        let mut which = Vec::new();
        let mut prefixes: Vec<&[TokenId]> = Vec::new();
        for (s, hyps) in alive.iter().enumerate() {
            for h in hyps {
                which.push(s);
                prefixes.push(&h.ids);
            }
        }
        if prefixes.is_empty() {
            break;
        }
        let lps = next(&which, &prefixes)?;
        let mut cursor = 0;
        let mut next_alive = Vec::with_capacity(batch);
        for (s, hyps) in alive.iter().enumerate() {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (hi, h) in hyps.iter().enumerate() {
                let lp = &lps[cursor + hi];
                for (tok, &x) in lp.iter().enumerate() {
                    if x.is_finite() && (step < cap || tok == EOS as usize) {
                        cands.push((h.score + x as f64, hi, tok));
                    }
                }
            }
            cursor += hyps.len();
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut fresh = Vec::new();
            for &(score, hi, tok) in cands.iter().take(beam) {
                let mut ids = hyps[hi].ids.clone();
                ids.push(tok as TokenId);
                if tok == EOS as usize {
                    done[s].push(Hyp { ids, score });
                } else {
                    fresh.push(Hyp { ids, score });
                }
            }
            let best_done = done[s].iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = fresh.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                fresh.clear();
            }
            next_alive.push(fresh);
        }
        alive = next_alive;
    }
    done.into_iter()
        .enumerate()
        .map(|(s, hyps)| {
            let best = hyps
                .into_iter()
                .reduce(|a, b| if b.score > a.score { b } else { a })
                .ok_or_else(|| {
                    Error::Contract(format!("beam search for input {s} produced no hypothesis"))
                })?;
            TokenSeq::new(best.ids)
        })
        .collect()
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
