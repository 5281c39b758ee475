//! Similarity functions and the multiple-negatives-ranking (MNR) loss.
//!
//! For a batch of aligned pairs `(U_i, V_i)` every `V_j` with `j != i` acts as
//! a negative for `U_i`. With `S_ij = scale * cos(U_i, V_j)`:
//!
//! ```text
//! L = sum_i -log( exp(S_ii) / sum_j exp(S_ij) )
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Cosine,
    Dot,
    /// `-||u - v||_2`, so larger is always more similar.
    NegEuclidean,
    /// `-||u - v||_1`.
    NegManhattan,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::Cosine,
        SimilarityKind::NegManhattan,
        SimilarityKind::NegEuclidean,
        SimilarityKind::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Dot => "dot",
            SimilarityKind::NegEuclidean => "euclidean",
            SimilarityKind::NegManhattan => "manhattan",
        }
    }
}

fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

pub fn similarity<T: Scalar>(u: &[T], v: &[T], kind: SimilarityKind) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "similarity",
            lhs: (1, u.len()),
            rhs: (1, v.len()),
        });
    }
    Ok(match kind {
        SimilarityKind::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == T::zero() || nv == T::zero() {
                return Err(Error::ZeroNorm);
            }
            dot(u, v) / (nu * nv)
        }
        SimilarityKind::Dot => dot(u, v),
        SimilarityKind::NegEuclidean => -u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt(),
        SimilarityKind::NegManhattan => -u.iter().zip(v).map(|(&a, &b)| (a - b).abs()).sum::<T>(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnrConfig {
    /// Multiplier on cosine similarities before the softmax.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for MnrConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

impl MnrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("mnr scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Records the MNR loss of `u` against `v` (both `n×d`) on the tape.
pub fn mnr_loss<T: Scalar>(tape: &mut Tape<'_, T>, u: Var, v: Var, cfg: &MnrConfig) -> Result<Var> {
    cfg.validate()?;
    let (su, sv) = (tape.value(u).shape(), tape.value(v).shape());
    if su != sv || su.0 == 0 {
        return Err(Error::Shape {
            op: "mnr_loss",
            lhs: su,
            rhs: sv,
        });
    }
    let un = tape.normalize_rows(u)?;
    let vn = tape.normalize_rows(v)?;
    let vt = tape.transpose(vn);
    let cos = tape.matmul(un, vt)?;
    let s = tape.scale(cos, T::of(cfg.scale));
    if !tape.value(s).is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let logp = tape.log_softmax_rows(s);
    let diag = tape.diagonal(logp)?;
    let total = tape.sum(diag);
    let k = match cfg.reduction {
        Reduction::Sum => -T::one(),
        Reduction::Mean => -T::one() / T::of(su.0 as f64),
    };
    Ok(tape.scale(total, k))
}

/// Loss value without gradients.
pub fn mnr_loss_value<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>, cfg: &MnrConfig) -> Result<T> {
    let mut tape = Tape::no_grad();
    let (a, b) = (tape.param(u), tape.param(v));
    let l = mnr_loss(&mut tape, a, b, cfg)?;
    Ok(tape.value(l).data()[0])
}

/// Fraction of rows whose best-matching column (by cosine) is the diagonal.
/// Ties go to the lowest index; a zero-norm row scores similarity 0.
pub fn mnr_accuracy<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> f64 {
    let n = u.rows().min(v.rows());
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0;
    for i in 0..n {
        let mut best = 0;
        let mut best_sim = T::neg_infinity();
        for j in 0..n {
            let s = similarity(u.row(i), v.row(j), SimilarityKind::Cosine).unwrap_or(T::zero());
            if s > best_sim {
                best = j;
                best_sim = s;
            }
        }
        hits += usize::from(best == i);
    }
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    /// The loss written out directly with f64 scalars.
    fn oracle(u: &Tensor<f64>, v: &Tensor<f64>, scale: f64) -> f64 {
        let n = u.rows();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        (0..n)
            .map(|i| {
                let denom: f64 = (0..n).map(|j| (scale * cos(u.row(i), v.row(j))).exp()).sum();
                -((scale * cos(u.row(i), v.row(i))).exp() / denom).ln()
            })
            .sum()
    }

    #[test]
    fn similarity_examples() {
        let c = |a: &[f64], b: &[f64], k| similarity(a, b, k).unwrap();
        assert!((c(&[3.0, 4.0], &[3.0, 4.0], SimilarityKind::Cosine) - 1.0).abs() < 1e-12);
        assert_eq!(c(&[1.0, 0.0], &[0.0, 1.0], SimilarityKind::Cosine), 0.0);
        assert_eq!(c(&[1.0, 2.0], &[3.0, 0.0], SimilarityKind::NegManhattan), -4.0);
        assert_eq!(c(&[1.0, 2.0], &[4.0, 6.0], SimilarityKind::NegEuclidean), -5.0);
        assert_eq!(c(&[1.0, 2.0], &[3.0, 4.0], SimilarityKind::Dot), 11.0);
        assert!(matches!(
            similarity(&[0.0, 0.0], &[1.0, 0.0], SimilarityKind::Cosine),
            Err(Error::ZeroNorm)
        ));
        assert!(similarity(&[1.0], &[1.0, 2.0], SimilarityKind::Dot).is_err());
    }

    #[test]
    fn loss_examples() {
        let cfg = MnrConfig::default();
        let l = mnr_loss_value(&t(&[&[0.3, -2.0, 1.0]]), &t(&[&[1.0, 1.0, 1.0]]), &cfg).unwrap();
        assert_eq!(l, 0.0);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = mnr_loss_value(&eye, &eye, &cfg).unwrap();
        assert!((l - 0.626524).abs() < 1e-6, "{l}");
        assert!((l - 2.0 * (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let big = MnrConfig {
            scale: 200.0,
            ..cfg
        };
        assert!(mnr_loss_value(&eye, &eye, &big).unwrap() < 1e-50);
        let mean = MnrConfig {
            reduction: Reduction::Mean,
            ..cfg
        };
        assert!((mnr_loss_value(&eye, &eye, &mean).unwrap() - l / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_errors() {
        let cfg = MnrConfig::default();
        let z = t(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let ok = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(mnr_loss_value(&z, &ok, &cfg), Err(Error::ZeroNorm)));
        assert!(mnr_loss_value(&ok, &t(&[&[1.0, 0.0]]), &cfg).is_err());
        let bad = MnrConfig { scale: 0.0, ..cfg };
        assert!(matches!(mnr_loss_value(&ok, &ok, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_examples() {
        let eye = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let rev = t(&[&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(mnr_accuracy(&eye, &eye), 1.0);
        let swap = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let eye2 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(mnr_accuracy(&eye2, &swap), 0.0);
        assert!((mnr_accuracy(&eye, &rev) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mnr_accuracy(&t(&[&[2.0, 1.0]]), &t(&[&[-1.0, 0.0]])), 1.0);
        // Tie: both columns identical, lowest index wins.
        let same = t(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(mnr_accuracy(&same, &same), 0.5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::SeedableRng;
        for (n, d) in [(1, 3), (2, 2), (3, 5), (4, 8)] {
            let u = Tensor::<f64>::randn(n, d, 1.0, &mut rng).trainable();
            let v = Tensor::<f64>::randn(n, d, 1.0, &mut rng).trainable();
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let cfg = MnrConfig { scale: 3.0, reduction };
                let report = check_gradients(&[u.clone(), v.clone()], &GradCheck::default(), |tape, x| {
                    mnr_loss(tape, x[0], x[1], &cfg)
                })
                .unwrap();
                assert!(report.passed(), "{n}x{d}: {:?}", report.relative_errors);
            }
        }
    }

    fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(n, d)| {
            let cell = prop::collection::vec(-3.0f64..3.0, n * d);
            (cell.clone(), cell).prop_filter_map("non-zero rows", move |(a, b)| {
                let u = Tensor::new(n, d, a).ok()?;
                let v = Tensor::new(n, d, b).ok()?;
                let ok = |m: &Tensor<f64>| (0..n).all(|i| norm(m.row(i)) > 1e-3);
                (ok(&u) && ok(&v)).then_some((u, v))
            })
        })
    }

    proptest! {
        #[test]
        fn loss_matches_oracle_and_is_nonnegative((u, v) in pair(), scale in 0.5f64..20.0) {
            let cfg = MnrConfig { scale, reduction: Reduction::Sum };
            let l = mnr_loss_value(&u, &v, &cfg).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - oracle(&u, &v, scale)).abs() < 1e-9 * (1.0 + l));
        }

        #[test]
        fn joint_permutation_invariance((u, v) in pair(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = u.rows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = |m: &Tensor<f64>| {
                let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let cfg = MnrConfig::default();
            let a = mnr_loss_value(&u, &v, &cfg).unwrap();
            let b = mnr_loss_value(&p(&u), &p(&v), &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn cosine_in_range((u, v) in pair()) {
            for i in 0..u.rows() {
                for j in 0..v.rows() {
                    let c = similarity(u.row(i), v.row(j), SimilarityKind::Cosine).unwrap();
                    prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
                }
            }
        }

        #[test]
        fn larger_scale_lowers_loss_when_positives_dominate(
            n in 2usize..6, noise in prop::collection::vec(-0.2f64..0.2, 36), s in 0.5f64..10.0, ds in 0.1f64..10.0
        ) {
            // Rows near distinct basis vectors: the diagonal strictly dominates.
            let d = 6;
            let mk = |off: usize| {
                let mut data = vec![0.0; n * d];
                for i in 0..n {
                    data[i * d + i] = 1.0;
                    for c in 0..d {
                        data[i * d + c] += noise[(i * d + c + off) % noise.len()] * 0.5;
                    }
                }
                Tensor::new(n, d, data).unwrap()
            };
            let (u, v) = (mk(0), mk(7));
            let dominates = (0..n).all(|i| (0..n).all(|j| {
                j == i || similarity(u.row(i), v.row(i), SimilarityKind::Cosine).unwrap()
                    > similarity(u.row(i), v.row(j), SimilarityKind::Cosine).unwrap()
            }));
            prop_assume!(dominates);
            let lo = mnr_loss_value(&u, &v, &MnrConfig { scale: s, reduction: Reduction::Sum }).unwrap();
            let hi = mnr_loss_value(&u, &v, &MnrConfig { scale: s + ds, reduction: Reduction::Sum }).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
