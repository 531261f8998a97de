//! Scaled dot-product attention and the multi-head wrapper.
//!
//! One forward routine serves both architectures: the baseline projects
//! queries, keys, and values from the same m-wide stream, while the proposed
//! variant projects queries/keys from the 2m-wide concatenated stream and
//! values from the m-wide normalized embedding it reuses at every block.

use crate::error::{Error, Result};
use crate::layers::ParamBuilder;
use crate::tensor::{Element, Tensor};

/// Per-head projections. Query/key share an input width; the value input may
/// be a different (narrower) stream.
pub struct HeadWeights<T: Element> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
}

/// p heads plus the output projection back to the stream width.
pub struct MultiHeadWeights<T: Element> {
    pub heads: Vec<HeadWeights<T>>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Element> MultiHeadWeights<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        d_qk: usize,
        d_v: usize,
        r: usize,
        q: usize,
        p: usize,
        d_out: usize,
    ) -> Self {
        let heads = (0..p)
            .map(|h| HeadWeights {
                wq: b.glorot(format!("{prefix}.h{h}.wq"), d_qk, r),
                bq: b.filled(format!("{prefix}.h{h}.bq"), r, 0.0),
                wk: b.glorot(format!("{prefix}.h{h}.wk"), d_qk, r),
                bk: b.filled(format!("{prefix}.h{h}.bk"), r, 0.0),
                wv: b.glorot(format!("{prefix}.h{h}.wv"), d_v, q),
                bv: b.filled(format!("{prefix}.h{h}.bv"), q, 0.0),
            })
            .collect();
        MultiHeadWeights {
            heads,
            wo: b.glorot(format!("{prefix}.wo"), q * p, d_out),
            bo: b.filled(format!("{prefix}.bo"), d_out, 0.0),
        }
    }

    /// Projects, attends per head, concatenates, and projects out.
    /// `mask` is added to every head's scores (padding or causal).
    pub fn forward(
        &self,
        q_src: &Tensor<T>,
        k_src: &Tensor<T>,
        v_src: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        scale_dim: usize,
    ) -> Result<Tensor<T>> {
        let h0 = self.heads.first().ok_or_else(|| {
            Error::Config("multi-head attention needs at least one head".into())
        })?;
        if q_src.cols() != h0.wq.shape()[0]
            || k_src.cols() != h0.wk.shape()[0]
            || v_src.cols() != h0.wv.shape()[0]
        {
            return Err(Error::Config(format!(
                "attention width mismatch: inputs {}x{}x{} vs projections {}x{}x{}",
                q_src.cols(),
                k_src.cols(),
                v_src.cols(),
                h0.wq.shape()[0],
                h0.wk.shape()[0],
                h0.wv.shape()[0],
            )));
        }
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = q_src.matmul(&head.wq)?.add(&head.bq)?;
            let k = k_src.matmul(&head.wk)?.add(&head.bk)?;
            let v = v_src.matmul(&head.wv)?.add(&head.bv)?;
            outputs.push(scaled_dot_attention(&q, &k, &v, mask, scale_dim)?);
        }
        let refs: Vec<&Tensor<T>> = outputs.iter().collect();
        Tensor::concat_cols(&refs)?.matmul(&self.wo)?.add(&self.bo)
    }
}

/// softmax(Q·Kᵀ/√scale_dim + mask)·V. `scale_dim` is the embedding dim in
/// the written formula; a config switch can pass the head dim instead.
pub fn scaled_dot_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    scale_dim: usize,
) -> Result<Tensor<T>> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let k_rows = k.shape()[k.shape().len() - 2];
    let v_rows = v.shape()[v.shape().len() - 2];
    if k_rows != v_rows {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut scores = q
        .matmul_nt(k)?
        .scale(T::from_f64(1.0 / (scale_dim as f64).sqrt()));
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax_rows()?.matmul(v)
}

/// n×n additive mask hiding the future: −∞ strictly above the diagonal.
pub fn causal_mask<T: Element>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::neg_infinity();
        }
    }
    Tensor::constant(data, vec![n, n]).expect("square shape is valid")
}

/// Additive key mask for padded rows: shape [batch, 1, n], −∞ where the id is
/// `pad`. `None` when nothing is padded (the mask would be all zeros).
pub fn pad_key_mask<T: Element>(ids: &[u32], batch: usize, n: usize, pad: u32) -> Option<Tensor<T>> {
    if ids.iter().all(|&i| i != pad) {
        return None;
    }
    let data: Vec<T> = ids
        .iter()
        .map(|&i| if i == pad { T::neg_infinity() } else { T::zero() })
        .collect();
    Some(Tensor::constant(data, vec![batch, 1, n]).expect("mask shape is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f64>, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn single_key_gets_full_weight() {
        let q = t(vec![0.3, -0.7], vec![1, 2]);
        let k = t(vec![1.0, 2.0], vec![1, 2]);
        let v = t(vec![5.0, 6.0, 7.0], vec![1, 3]);
        let out = scaled_dot_attention(&q, &k, &v, None, 2).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn uniform_scores_average_values() {
        // Zero queries → all scores equal → output is the column mean of V.
        let q = t(vec![0.0; 4], vec![2, 2]);
        let k = t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![3, 2]);
        let v = t(vec![3.0, 0.0, 6.0, 3.0, 0.0, 6.0], vec![3, 2]);
        let out = scaled_dot_attention(&q, &k, &v, None, 2).unwrap();
        for row in 0..2 {
            assert!((out.to_vec()[row * 2] - 3.0).abs() < 1e-12);
            assert!((out.to_vec()[row * 2 + 1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_fixtures() {
        assert_eq!(causal_mask::<f64>(1).to_vec(), vec![0.0]);
        let m2 = causal_mask::<f64>(2).to_vec();
        assert_eq!(m2[0], 0.0);
        assert_eq!(m2[1], f64::NEG_INFINITY);
        assert_eq!(m2[2], 0.0);
        assert_eq!(m2[3], 0.0);
    }

    #[test]
    fn first_row_sees_only_first_key_and_last_row_everything() {
        let n = 3;
        let q = t(vec![0.0; n * 2], vec![n, 2]);
        let k = t(vec![0.0; n * 2], vec![n, 2]);
        let v = t(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], vec![n, 2]);
        let mask = causal_mask::<f64>(n);
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask), 2).unwrap();
        let o = out.to_vec();
        // Row 1: weight 1 on V row 1.
        assert_eq!(&o[..2], &[1.0, 10.0]);
        // Last row: uniform over all three (zero scores) → [2, 20].
        assert!((o[4] - 2.0).abs() < 1e-12);
        assert!((o[5] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let q = t(rand_vec(2 * 3), vec![2, 3]);
        let kd = rand_vec(4 * 3);
        let vd = rand_vec(4 * 2);
        let k = t(kd.clone(), vec![4, 3]);
        let v = t(vd.clone(), vec![4, 2]);
        let base = scaled_dot_attention(&q, &k, &v, None, 3).unwrap().to_vec();

        // Rotate key/value rows together.
        let perm = [2usize, 3, 0, 1];
        let kp: Vec<f64> = perm.iter().flat_map(|&r| kd[r * 3..(r + 1) * 3].to_vec()).collect();
        let vp: Vec<f64> = perm.iter().flat_map(|&r| vd[r * 2..(r + 1) * 2].to_vec()).collect();
        let out = scaled_dot_attention(&q, &t(kp, vec![4, 3]), &t(vp, vec![4, 2]), None, 3)
            .unwrap()
            .to_vec();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_head_identity_weights_reduce_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut rng);
        let mha: MultiHeadWeights<f64> = MultiHeadWeights::new(&mut b, "t", 2, 2, 2, 2, 1, 2);
        let eye = [1.0, 0.0, 0.0, 1.0];
        for w in [&mha.heads[0].wq, &mha.heads[0].wk, &mha.heads[0].wv, &mha.wo] {
            w.update_data(|v, i| *v = eye[i]);
        }
        let x = t(vec![0.4, -0.2, 1.1, 0.9], vec![2, 2]);
        let direct = scaled_dot_attention(&x, &x, &x, None, 2).unwrap();
        let viaheads = mha.forward(&x, &x, &x, None, 2).unwrap();
        for (a, b) in direct.to_vec().iter().zip(viaheads.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_heads_match_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = ParamBuilder::new(&mut rng);
        let mha: MultiHeadWeights<f64> = MultiHeadWeights::new(&mut b, "t", 4, 4, 2, 2, 2, 4);
        let x = t(
            (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect(),
            vec![3, 4],
        );
        let composed = mha.forward(&x, &x, &x, None, 4).unwrap();

        // Hand-compose from the primitives.
        let mut parts = Vec::new();
        for h in &mha.heads {
            let q = x.matmul(&h.wq).unwrap().add(&h.bq).unwrap();
            let k = x.matmul(&h.wk).unwrap().add(&h.bk).unwrap();
            let v = x.matmul(&h.wv).unwrap().add(&h.bv).unwrap();
            parts.push(scaled_dot_attention(&q, &k, &v, None, 4).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let oracle = Tensor::concat_cols(&refs)
            .unwrap()
            .matmul(&mha.wo)
            .unwrap()
            .add(&mha.bo)
            .unwrap();
        assert_eq!(composed.to_vec(), oracle.to_vec());
    }

    #[test]
    fn proposed_widths_produce_2m_output() {
        // m=4: queries/keys from the 8-wide stream, values from the 4-wide
        // embedding, output back at width 8.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut rng);
        let mha: MultiHeadWeights<f64> = MultiHeadWeights::new(&mut b, "t", 8, 4, 4, 4, 2, 8);
        let stream = t((0..16).map(|i| i as f64 * 0.05).collect(), vec![2, 8]);
        let embed = t((0..8).map(|i| i as f64 * 0.1).collect(), vec![2, 4]);
        let out = mha.forward(&stream, &stream, &embed, None, 4).unwrap();
        assert_eq!(out.shape(), &[2, 8]);

        // Cross-mode: 2 query rows against 5 key rows.
        let kstream = t(vec![0.1; 40], vec![5, 8]);
        let kembed = t(vec![0.2; 20], vec![5, 4]);
        let cross = mha.forward(&stream, &kstream, &kembed, None, 4).unwrap();
        assert_eq!(cross.shape(), &[2, 8]);
    }

    #[test]
    fn masked_path_is_causal_in_values() {
        // Perturbing V row 2 must not change output rows 0 or 1.
        let q = t(vec![0.3; 9], vec![3, 3]);
        let k = t(vec![0.7; 9], vec![3, 3]);
        let mask = causal_mask::<f64>(3);
        let v1 = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], vec![3, 3]);
        let v2 = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -70.0, 80.0, 0.9], vec![3, 3]);
        let a = scaled_dot_attention(&q, &k, &v1, Some(&mask), 3).unwrap().to_vec();
        let b = scaled_dot_attention(&q, &k, &v2, Some(&mask), 3).unwrap().to_vec();
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6..], b[6..]);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ParamBuilder::new(&mut rng);
        let mha: MultiHeadWeights<f64> = MultiHeadWeights::new(&mut b, "t", 4, 4, 2, 2, 1, 4);
        let narrow = t(vec![0.0; 6], vec![2, 3]);
        assert!(matches!(
            mha.forward(&narrow, &narrow, &narrow, None, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pad_mask_marks_only_padding() {
        let ids = [5u32, 6, 0, 0];
        let m = pad_key_mask::<f64>(&ids, 1, 4, 0).unwrap();
        assert_eq!(m.shape(), &[1, 1, 4]);
        let d = m.to_vec();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], f64::NEG_INFINITY);
        assert_eq!(d[3], f64::NEG_INFINITY);
        assert!(pad_key_mask::<f64>(&[1, 2], 1, 2, 0).is_none());
    }
}
