//! Two-stream clue interaction with learnable-query compression and the
//! consistency loss between the compressed visual and clue tokens.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::nn::{normal_tensor, EncoderBlock, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

/// Learnable queries cross-attending into one stream, then an FFN, both
/// with pre-norm residuals.
#[derive(Clone, Debug)]
pub struct QueryReader {
    pub ln_query: LayerNorm,
    pub ln_stream: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl QueryReader {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), dim),
            ln_stream: LayerNorm::new(store, &format!("{name}.ln_stream"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng),
        })
    }

    /// Cross-attention of `queries` into `stream` (the pre-FFN token).
    pub fn read<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, queries: Var, stream: Var) -> Result<Var> {
        let q = self.ln_query.forward(g, ps, queries)?;
        let s = self.ln_stream.forward(g, ps, stream)?;
        self.attn.forward(g, ps, q, s, None)
    }

    /// `FFN(Attn(queries, stream, stream))` with a residual around the FFN
    /// only. A query-side residual would hand both readers the same `E^e`
    /// term, which the consistency loss could then satisfy without reading
    /// either stream.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, queries: Var, stream: Var) -> Result<Var> {
        let h = self.read(g, ps, queries, stream)?;
        let f = self.ln_ffn.forward(g, ps, h)?;
        let f = self.ffn.forward(g, ps, f)?;
        g.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct InteractionBlock {
    pub visual: Vec<EncoderBlock>,
    pub clue: Vec<EncoderBlock>,
    /// `E`: `[L, d_llm]`.
    pub queries: ParamId,
    pub query_self: EncoderBlock,
    pub read_visual: QueryReader,
    pub read_clue: QueryReader,
}

impl InteractionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        queries: usize,
        heads: usize,
        layers: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stream = |store: &mut ParamStore, tag: &str, rng: &mut _| -> Result<Vec<EncoderBlock>> {
            (0..layers)
                .map(|i| EncoderBlock::new(store, &format!("{name}.{tag}{i}"), dim, heads, ffn_mult, rng))
                .collect()
        };
        let visual = stream(store, "visual", rng)?;
        let clue = stream(store, "clue", rng)?;
        let queries = store.add(&format!("{name}.queries"), normal_tensor(&[queries, dim], 0.02, rng));
        Ok(Self {
            visual,
            clue,
            queries,
            query_self: EncoderBlock::new(store, &format!("{name}.query_self"), dim, heads, ffn_mult, rng)?,
            read_visual: QueryReader::new(store, &format!("{name}.read_visual"), dim, heads, ffn_mult, rng)?,
            read_clue: QueryReader::new(store, &format!("{name}.read_clue"), dim, heads, ffn_mult, rng)?,
        })
    }

    /// Self-attends one stream with its own weights.
    pub fn attend_stream<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, blocks: &[EncoderBlock], x: Var) -> Result<Var> {
        let mut x = x;
        for b in blocks {
            x = b.forward(g, ps, x, None)?;
        }
        Ok(x)
    }

    /// `(V′, C′)`: each stream self-attended independently.
    pub fn self_attend_streams<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, visual: Var, clue: Var) -> Result<(Var, Var)> {
        let v = self.attend_stream(g, ps, &self.visual, visual)?;
        let c = self.attend_stream(g, ps, &self.clue, clue)?;
        Ok((v, c))
    }

    /// `E^e`: the self-attended learnable queries.
    pub fn shared_queries<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Result<Var> {
        let e = g.param(ps, self.queries);
        self.query_self.forward(g, ps, e, None)
    }

    /// `(E^v, E^c)` from shared queries reading each stream.
    pub fn query_compress<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, v: Var, c: Var) -> Result<(Var, Var)> {
        let ee = self.shared_queries(g, ps)?;
        let ev = self.read_visual.forward(g, ps, ee, v)?;
        let ec = self.read_clue.forward(g, ps, ee, c)?;
        Ok((ev, ec))
    }

    /// `E^v` alone, for the clue-free variant.
    pub fn compress_visual<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, v: Var) -> Result<Var> {
        let ee = self.shared_queries(g, ps)?;
        self.read_visual.forward(g, ps, ee, v)
    }
}

/// `-(1/L) Σ_i cos(E^v_i, E^c_i)`.
pub fn dc_loss<T: Real>(g: &mut Graph<T>, ev: Var, ec: Var) -> Result<Var> {
    if g.shape(ev).len() != 2 {
        return contract("consistency loss expects [L, d] token matrices");
    }
    let cos = g.cosine_rows(ev, ec)?;
    let m = g.mean(cos);
    Ok(g.neg(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(heads: usize) -> (ParamStore, InteractionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = InteractionBlock::new(&mut store, "ix", 8, 3, heads, 1, 2, &mut rng).unwrap();
        (store, b)
    }

    fn dc(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = dc_loss(&mut g, a, b)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn dc_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_tensor(&[4, 6], 1.0, &mut rng).cast::<f64>();
        assert!((dc(&a, &a).unwrap() + 1.0).abs() < 1e-12);
        assert!((dc(&a, &a.map(|v| -v)).unwrap() - 1.0).abs() < 1e-12);
        let e = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::new(&[2, 2], alloc::vec![0.0, 2.0, -3.0, 0.0]).unwrap();
        assert!(dc(&e, &f).unwrap().abs() < 1e-12);
        let z = Tensor::zeros(&[2, 2]);
        assert!(dc(&e, &z).is_err());
    }

    #[test]
    fn streams_do_not_leak() {
        let (store, b) = block(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = normal_tensor(&[5, 8], 1.0, &mut rng);
        let c = normal_tensor(&[4, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (vv, cv) = (g.constant(v.clone()), g.constant(c));
        let zc = g.constant(Tensor::zeros(&[4, 8]));
        let (v1, _) = b.self_attend_streams(&mut g, &store, vv, cv).unwrap();
        let (v2, _) = b.self_attend_streams(&mut g, &store, vv, zc).unwrap();
        assert_eq!(g.value(v1), g.value(v2));
    }

    #[test]
    fn uniform_stream_gives_equal_reads() {
        let (store, b) = block(2);
        let mut g = Graph::new();
        let u: Vec<f32> = (0..8).map(|i| i as f32 * 0.3 - 1.0).collect();
        let rows: Vec<Vec<f32>> = (0..6).map(|_| u.clone()).collect();
        let s = g.constant(Tensor::from_rows(&rows).unwrap());
        let ee = b.shared_queries(&mut g, &store).unwrap();
        let r = b.read_visual.read(&mut g, &store, ee, s).unwrap();
        let out = g.value(r);
        for i in 1..out.rows() {
            for (a, c) in out.row(i).iter().zip(out.row(0)) {
                assert!((a - c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn outputs_have_query_length() {
        let (store, b) = block(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let v = g.constant(normal_tensor(&[7, 8], 1.0, &mut rng));
        let c = g.constant(normal_tensor(&[2, 8], 1.0, &mut rng));
        let (v, c) = b.self_attend_streams(&mut g, &store, v, c).unwrap();
        let (ev, ec) = b.query_compress(&mut g, &store, v, c).unwrap();
        assert_eq!(g.shape(ev), &[3, 8]);
        assert_eq!(g.shape(ec), &[3, 8]);
        assert!(g.value(ev).all_finite() && g.value(ec).all_finite());
    }

    #[test]
    fn queries_are_permutation_equivariant() {
        let (mut store, b) = block(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = normal_tensor(&[5, 8], 1.0, &mut rng);
        let c = normal_tensor(&[4, 8], 1.0, &mut rng);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let (vv, cv) = (g.constant(v.clone()), g.constant(c.clone()));
            let (ev, ec) = b.query_compress(&mut g, store, vv, cv).unwrap();
            (g.value(ev).clone(), g.value(ec).clone())
        };
        let (ev, ec) = run(&store);
        let e = store.value(b.queries).clone();
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| e.row(i).to_vec()).collect();
        *store.value_mut(b.queries) = Tensor::from_rows(&permuted).unwrap();
        let (pv, pc) = run(&store);
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in pv.row(new).iter().zip(ev.row(old)) {
                assert!((x - y).abs() < 1e-5);
            }
            for (x, y) in pc.row(new).iter().zip(ec.row(old)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
