//! Linear-complexity attention.
//!
//! Queries are softmax-normalized over the feature axis of each position and
//! keys over the position axis of each feature, so the output can be
//! formed as `softmax_row(Q) · (softmax_col(K)ᵀ · V)` without ever building
//! the `N x N` attention matrix.

use rand::Rng;

use super::layers::{Conv2d, ConvCache};
use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Intermediate values of the attention kernel, all channel-major
/// (`[feature][position]`).
#[derive(Debug, Clone)]
pub(crate) struct KernelCache<F> {
    /// Query softmax, `d x n`.
    q_soft: Vec<F>,
    /// Key softmax, `d x n`.
    k_soft: Vec<F>,
    /// Values, `dv x n`.
    values: Vec<F>,
    /// Global context `k_soft · valuesᵀ`, `d x dv`.
    context: Vec<F>,
}

fn softmax_in_place<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Channel-major kernel: `q`, `k` are `d x n`, `v` is `dv x n`; returns `dv x n`.
pub(crate) fn kernel_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    dv: usize,
    n: usize,
) -> (Vec<F>, KernelCache<F>) {
    // softmax over features for each position
    let mut q_soft = vec![F::zero(); d * n];
    let mut column = vec![F::zero(); d];
    for pos in 0..n {
        for f in 0..d {
            column[f] = q[f * n + pos];
        }
        softmax_in_place(&mut column);
        for f in 0..d {
            q_soft[f * n + pos] = column[f];
        }
    }
    // softmax over positions for each feature
    let mut k_soft = k.to_vec();
    for row in k_soft.chunks_mut(n) {
        softmax_in_place(row);
    }
    let mut context = vec![F::zero(); d * dv];
    F::gemm(d, n, dv, &k_soft, false, v, true, &mut context, false);
    let mut out = vec![F::zero(); dv * n];
    F::gemm(dv, d, n, &context, true, &q_soft, false, &mut out, false);
    (
        out,
        KernelCache {
            q_soft,
            k_soft,
            values: v.to_vec(),
            context,
        },
    )
}

/// Returns `(dq, dk, dv)` for an upstream gradient `dout` (`dv x n`).
pub(crate) fn kernel_backward<F: Real>(
    cache: &KernelCache<F>,
    dout: &[F],
    d: usize,
    dv: usize,
    n: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    // out = contextᵀ · q_soft
    let mut d_context = vec![F::zero(); d * dv];
    F::gemm(d, n, dv, &cache.q_soft, false, dout, true, &mut d_context, false);
    let mut d_qsoft = vec![F::zero(); d * n];
    F::gemm(d, dv, n, &cache.context, false, dout, false, &mut d_qsoft, false);
    // context = k_soft · valuesᵀ
    let mut d_ksoft = vec![F::zero(); d * n];
    F::gemm(d, dv, n, &d_context, false, &cache.values, false, &mut d_ksoft, false);
    let mut d_values = vec![F::zero(); dv * n];
    F::gemm(dv, d, n, &d_context, true, &cache.k_soft, false, &mut d_values, false);

    let mut dq = vec![F::zero(); d * n];
    for pos in 0..n {
        let dot = (0..d).fold(F::zero(), |a, f| {
            a + cache.q_soft[f * n + pos] * d_qsoft[f * n + pos]
        });
        for f in 0..d {
            let i = f * n + pos;
            dq[i] = cache.q_soft[i] * (d_qsoft[i] - dot);
        }
    }
    let mut dk = vec![F::zero(); d * n];
    for f in 0..d {
        let s = &cache.k_soft[f * n..(f + 1) * n];
        let ds = &d_ksoft[f * n..(f + 1) * n];
        let dot = s.iter().zip(ds).fold(F::zero(), |a, (&x, &y)| a + x * y);
        for pos in 0..n {
            dk[f * n + pos] = s[pos] * (ds[pos] - dot);
        }
    }
    (dq, dk, d_values)
}

/// Efficient attention on row-major operands: `queries` and `keys` are
/// `n x d`, `values` is `n x dv`; the result is `n x dv`.
pub fn efficient_attention<F: Real>(
    queries: &[F],
    keys: &[F],
    values: &[F],
    n: usize,
    d: usize,
    dv: usize,
) -> Result<Vec<F>> {
    if d == 0 || dv == 0 {
        return Err(Error::Shape("attention feature dimensions must be positive".into()));
    }
    if queries.len() != n * d || keys.len() != n * d || values.len() != n * dv {
        return Err(Error::Shape(format!(
            "attention operands: queries {} keys {} values {} for n={n} d={d} dv={dv}",
            queries.len(),
            keys.len(),
            values.len()
        )));
    }
    let transpose = |m: &[F], rows: usize, cols: usize| -> Vec<F> {
        let mut t = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = m[r * cols + c];
            }
        }
        t
    };
    let (out, _) = kernel_forward(
        &transpose(queries, n, d),
        &transpose(keys, n, d),
        &transpose(values, n, dv),
        d,
        dv,
        n,
    );
    Ok(transpose(&out, dv, n))
}

/// Residual self-attention block over the spatial positions of a feature map.
#[derive(Debug, Clone)]
pub(crate) struct AttentionBlock {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    output: Conv2d,
    channels: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<F> {
    q: ConvCache<F>,
    k: ConvCache<F>,
    v: ConvCache<F>,
    o: ConvCache<F>,
    kernel: KernelCache<F>,
}

impl AttentionBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let mut proj = |suffix: &str| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.{suffix}"),
                channels,
                channels,
                1,
                1,
                ParamKind::AttentionProjection,
                false,
            )
        };
        Self {
            query: proj("query"),
            key: proj("key"),
            value: proj("value"),
            output: proj("output"),
            channels,
        }
    }

    pub fn forward<F: Real>(
        &self,
        p: &[F],
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, AttentionCache<F>)> {
        let (q, qc) = self.query.forward(p, x)?;
        let (k, kc) = self.key.forward(p, x)?;
        let (v, vc) = self.value.forward(p, x)?;
        let n = x.plane_len();
        let (att, kernel) = kernel_forward(q.data(), k.data(), v.data(), self.channels, self.channels, n);
        let att = Tensor::from_vec(self.channels, x.height(), x.width(), att)?;
        let (mut out, oc) = self.output.forward(p, &att)?;
        out.data_mut()
            .iter_mut()
            .zip(x.data())
            .for_each(|(o, &v)| *o += v);
        Ok((
            out,
            AttentionCache {
                q: qc,
                k: kc,
                v: vc,
                o: oc,
                kernel,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        cache: &AttentionCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let (c, h, w) = dy.shape();
        let datt = self.output.backward(p, g, &cache.o, dy);
        let (dq, dk, dv) = kernel_backward(&cache.kernel, datt.data(), c, c, h * w);
        let as_tensor = |v: Vec<F>| Tensor::from_vec(c, h, w, v).expect("attention shape");
        let mut dx = dy.clone();
        for part in [
            self.query.backward(p, g, &cache.q, &as_tensor(dq)),
            self.key.backward(p, g, &cache.k, &as_tensor(dk)),
            self.value.backward(p, g, &cache.v, &as_tensor(dv)),
        ] {
            dx.data_mut()
                .iter_mut()
                .zip(part.data())
                .for_each(|(a, &b)| *a += b);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward two-stage evaluation with explicit loops and
    /// independent softmax code.
    fn brute_force(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> Vec<f64> {
        let mut qs = vec![0.0; n * d];
        for i in 0..n {
            let z: f64 = (0..d).map(|j| q[i * d + j].exp()).sum();
            for j in 0..d {
                qs[i * d + j] = q[i * d + j].exp() / z;
            }
        }
        let mut ks = vec![0.0; n * d];
        for j in 0..d {
            let z: f64 = (0..n).map(|i| k[i * d + j].exp()).sum();
            for i in 0..n {
                ks[i * d + j] = k[i * d + j].exp() / z;
            }
        }
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..d {
                    let mut ctx = 0.0;
                    for m in 0..n {
                        ctx += ks[m * d + j] * v[m * dv + c];
                    }
                    acc += qs[i * d + j] * ctx;
                }
                out[i * dv + c] = acc;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, d, dv) in &[(3, 2, 2), (5, 3, 4), (1, 2, 3), (7, 1, 1)] {
            let (q, k, v) = (random(&mut rng, n * d), random(&mut rng, n * d), random(&mut rng, n * dv));
            let got = efficient_attention(&q, &k, &v, n, d, dv).unwrap();
            let want = brute_force(&q, &k, &v, n, d, dv);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d) = (6, 3);
        let row = [0.25, -1.5];
        let v: Vec<f64> = (0..n).flat_map(|_| row).collect();
        let out =
            efficient_attention(&random(&mut rng, n * d), &random(&mut rng, n * d), &v, n, d, 2)
                .unwrap();
        for chunk in out.chunks(2) {
            assert!((chunk[0] - row[0]).abs() < 1e-12);
            assert!((chunk[1] - row[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_returns_value_row() {
        let out = efficient_attention::<f64>(&[0.3, -0.7], &[1.2, 0.4], &[4.0, 5.0, 6.0], 1, 2, 3).unwrap();
        for (a, b) in out.iter().zip(&[4.0, 5.0, 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_rows() {
        assert!(matches!(
            efficient_attention(&[0.0; 6], &[0.0; 4], &[0.0; 6], 3, 2, 2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            efficient_attention::<f64>(&[], &[], &[], 3, 0, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn both_softmax_factors_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d, dv) = (9, 4, 3);
        let (q, k, v) = (random(&mut rng, d * n), random(&mut rng, d * n), random(&mut rng, dv * n));
        let (out, cache) = kernel_forward(&q, &k, &v, d, dv, n);
        for pos in 0..n {
            let s: f64 = (0..d).map(|f| cache.q_soft[f * n + pos]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for row in cache.k_soft.chunks(n) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // convex combination of value rows: bounded per channel
        for c in 0..dv {
            let vals = &v[c * n..(c + 1) * n];
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            for pos in 0..n {
                let o = out[c * n + pos];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d, dv) = (5, 3, 2);
        let q = random(&mut rng, d * n);
        let k = random(&mut rng, d * n);
        let v = random(&mut rng, dv * n);
        let weights = random(&mut rng, dv * n);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let (out, _) = kernel_forward(q, k, v, d, dv, n);
            out.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = kernel_forward(&q, &k, &v, d, dv, n);
        let (dq, dk, dvv) = kernel_backward(&cache, &weights, d, dv, n);
        let h = 1e-6;
        let check = |which: usize, analytic: &[f64]| {
            let base = [&q, &k, &v][which];
            for i in 0..base.len() {
                let mut args = [q.clone(), k.clone(), v.clone()];
                args[which][i] += h;
                let plus = loss(&args[0], &args[1], &args[2]);
                args[which][i] -= 2.0 * h;
                let minus = loss(&args[0], &args[1], &args[2]);
                let numeric = (plus - minus) / (2.0 * h);
                assert!((numeric - analytic[i]).abs() < 1e-7, "{which}/{i}");
            }
        };
        check(0, &dq);
        check(1, &dk);
        check(2, &dvv);
    }
}
