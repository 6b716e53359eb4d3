//! Causal transformer text tower with a hand-written backward pass.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{text_backward, text_backward_acc, text_forward, text_global, TextCache};
pub use params::{decays, is_bias, LayerParams, TextEncoderConfig, TextEncoderParams, MLP_RATIO};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::tokenizer::TokenSequence;
    use rand::SeedableRng;

    fn tiny(n_layers: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            n_layers,
            n_heads: 2,
            width: 8,
            max_len: 7,
            vocab_size: 13,
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut v = ids.to_vec();
        let mut mask = vec![1u8; v.len()];
        v.resize(max_len, 0);
        mask.resize(max_len, 0);
        TokenSequence {
            ids: v,
            mask,
            sep_pos: ids.len() - 1,
        }
    }

    fn params(n_layers: usize, seed: u64) -> TextEncoderParams<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = TextEncoderParams::init(tiny(n_layers), &mut rng).unwrap();
        // larger weights than the 0.02 init so attention is not uniform
        for (_, t) in p.named_mut() {
            t.scale(20.0);
        }
        p
    }

    #[test]
    fn zero_layers_embeddings_only() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = TextEncoderParams::<f64>::init(tiny(0), &mut rng).unwrap();
        let s = seq(&[1, 5, 2], 7);
        let (out, _) = text_forward(&s, &p).unwrap();
        // with only the final layer norm, the output is LN(tok + pos)
        for i in 0..3 {
            let mut x: Vec<f64> = p.tok_emb.row(s.ids[i] as usize).to_vec();
            for (a, &b) in x.iter_mut().zip(p.pos_emb.row(i)) {
                *a += b;
            }
            let mu = x.iter().sum::<f64>() / 8.0;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (x[c] - mu) / (var + 1e-5).sqrt();
                assert!((out.data.at(i, c) - want).abs() < 1e-9);
            }
        }
        assert!(out.data.row(5).iter().all(|&v| v == 0.0));
        assert!(text_forward(&seq(&[1, 13, 2], 7), &p).is_err());
    }

    #[test]
    fn pad_ids_do_not_matter_and_causal() {
        let p = params(2, 3);
        let a = seq(&[1, 4, 6, 2], 7);
        let mut b = a.clone();
        b.ids[5] = 9;
        b.ids[6] = 11;
        let (oa, _) = text_forward(&a, &p).unwrap();
        let (ob, _) = text_forward(&b, &p).unwrap();
        assert_eq!(oa.data.slice_rows(0, 4), ob.data.slice_rows(0, 4));

        let mut c = a.clone();
        c.ids[2] = 7;
        let (oc, _) = text_forward(&c, &p).unwrap();
        assert_eq!(oa.data.slice_rows(0, 2), oc.data.slice_rows(0, 2));
        assert_ne!(oa.data.row(2), oc.data.row(2));
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_absent_tokens_untouched() {
        let p = params(1, 4);
        let s = seq(&[1, 4, 2], 7);
        let (_, cache) = text_forward(&s, &p).unwrap();
        let g = text_backward(&p, &cache, &Mat::zeros(7, 8)).unwrap();
        assert!(g.named().iter().all(|(_, t)| t.as_slice().iter().all(|&v| v == 0.0)));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = text_backward(&p, &cache, &Mat::randn(7, 8, 1.0, &mut rng)).unwrap();
        for id in 0..13 {
            let used = [1, 4, 2].contains(&id);
            let nz = g.tok_emb.row(id as usize).iter().any(|&v| v != 0.0);
            assert_eq!(used, nz, "token {id}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = params(1, 6);
        let s = seq(&[1, 4, 6, 2], 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let up = Mat::<f64>::randn(7, 8, 1.0, &mut rng);
        let f = |q: &TextEncoderParams<f64>| {
            let (o, _) = text_forward(&s, q).unwrap();
            o.data.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = text_forward(&s, &p).unwrap();
        let g = text_backward(&p, &cache, &up).unwrap();
        let h = 1e-5;
        for ((name, t), (_, gt)) in p.named().into_iter().zip(g.named()) {
            for idx in (0..t.len()).step_by(7) {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.as_mut_slice()[idx] += h;
                minus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.as_mut_slice()[idx] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = gt.as_slice()[idx];
                let err = (fd - an).abs() / (1e-6f64).max(fd.abs() + an.abs());
                assert!(err < 1e-4, "{name}[{idx}]: fd {fd} analytic {an}");
            }
        }
    }
}
