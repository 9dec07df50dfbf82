//! Scaled residuals of the pointwise identities relating the pipeline's
//! tensors.
//!
//! Every residual is `|lhs - rhs| / max(1, largest constituent term)`,
//! maximized over tensor components.

use serde::Serialize;

use crate::error::Result;

use super::point::PointGeometry;
use super::{ChartPoint, FinslerMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityKind {
    /// An identity as stated for the pipeline objects.
    Listed,
    /// A consistent replacement for a listed identity whose stated form
    /// does not hold.
    Corrected,
    /// Candidate conventions under study; never gates a suite.
    Investigation,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityResidual {
    pub name: &'static str,
    pub kind: IdentityKind,
    pub residual: f64,
}

/// Running sum that remembers its largest summand.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Sum {
    pub(crate) value: f64,
    pub(crate) scale: f64,
}

impl Sum {
    pub(crate) fn of(v: f64) -> Self {
        Sum {
            value: v,
            scale: v.abs(),
        }
    }

    pub(crate) fn add(mut self, v: f64) -> Self {
        self.value += v;
        self.scale = self.scale.max(v.abs());
        self
    }
}

pub(crate) fn sum(terms: impl IntoIterator<Item = f64>) -> Sum {
    terms.into_iter().fold(Sum::default(), Sum::add)
}

pub(crate) fn scaled(lhs: Sum, rhs: Sum) -> f64 {
    (lhs.value - rhs.value).abs() / 1f64.max(lhs.scale).max(rhs.scale)
}

struct Collector {
    out: Vec<IdentityResidual>,
}

impl Collector {
    fn record(&mut self, name: &'static str, kind: IdentityKind, residuals: impl IntoIterator<Item = f64>) {
        let residual = residuals.into_iter().fold(0.0, f64::max);
        self.out.push(IdentityResidual { name, kind, residual });
    }
}

pub(crate) fn indices(n: usize, rank: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..rank {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..n).map(move |i| {
                    let mut w = v.clone();
                    w.push(i);
                    w
                })
            })
            .collect();
    }
    out
}

/// Cyclic sum over `(j, k, h)`.
pub(crate) fn cyclic(j: usize, k: usize, h: usize, f: impl Fn(usize, usize, usize) -> Sum) -> Sum {
    let a = f(j, k, h);
    let b = f(k, h, j);
    let c = f(h, j, k);
    Sum {
        value: a.value + b.value + c.value,
        scale: a.scale.max(b.scale).max(c.scale),
    }
}

pub(crate) fn merge(a: Sum, b: Sum) -> Sum {
    Sum {
        value: a.value + b.value,
        scale: a.scale.max(b.scale),
    }
}

pub(crate) fn scale_sum(s: Sum, c: f64) -> Sum {
    Sum {
        value: s.value * c,
        scale: s.scale * c.abs(),
    }
}

/// Listed identities whose stated form fails, paired with the corrected
/// identity that replaces them.
pub const SUPERSEDED: [(&str, &str); 3] = [
    (
        "h_ijkh_second_index_contraction",
        "h_ijkh_second_index_contraction_vanishes",
    ),
    ("h_landsberg_cartan_form", "h_landsberg_cartan_form_factor_two"),
    ("projective_h_up_y_two_p_delta", "projective_h_up_y"),
];

impl IdentityResidual {
    /// Whether the identity gates a verification suite.
    pub fn gates(&self) -> bool {
        match self.kind {
            IdentityKind::Investigation => false,
            IdentityKind::Corrected => true,
            IdentityKind::Listed => !SUPERSEDED.iter().any(|(literal, _)| *literal == self.name),
        }
    }
}

const LAMBDAS: [f64; 3] = [0.5, 2.0, 3.0];

/// Residuals of every identity at `p`. Projective-factor identities are
/// included only when `projective` is set, since they presuppose a
/// projectively flat metric.
pub fn identity_residuals(metric: &FinslerMetric, p: &ChartPoint, projective: bool) -> Result<Vec<IdentityResidual>> {
    use IdentityKind::*;
    let pg = PointGeometry::extended(metric, p)?;
    let n = pg.dimension();
    let y = &p.y;
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    let mut c = Collector { out: Vec::new() };

    // homogeneity
    c.record(
        "euler_f",
        Listed,
        [scaled(sum((0..n).map(|i| y[i] * pg.l[i])), Sum::of(pg.f))],
    );
    c.record(
        "euler_h",
        Listed,
        (0..n).map(|i| scaled(sum((0..n).map(|j| y[j] * pg.h2[[i, j]])), Sum::of(2.0 * pg.h[i]))),
    );
    let h5 = pg.h5.as_ref().expect("extended evaluation");
    c.record(
        "euler_h_ijkh",
        Listed,
        indices(n, 4).into_iter().map(|ix| {
            let (i, j, k, h) = (ix[0], ix[1], ix[2], ix[3]);
            scaled(
                sum((0..n).map(|m| y[m] * h5[[i, j, k, h, m]])),
                Sum::of(-pg.h4[[i, j, k, h]]),
            )
        }),
    );
    let mut spray_scaling = Vec::new();
    let mut h_scaling = Vec::new();
    for lambda in LAMBDAS {
        let q = p.scaled(lambda)?;
        let spray = super::spray_coefficients(metric, &q)?;
        let h = super::covariant_coefficients(metric, &q)?;
        for i in 0..n {
            let l2 = lambda * lambda;
            spray_scaling.push(scaled(Sum::of(spray[i]), Sum::of(l2 * pg.spray[i])));
            h_scaling.push(scaled(Sum::of(h[i]), Sum::of(l2 * pg.h[i])));
        }
    }
    c.record("spray_2_homogeneous", Listed, spray_scaling);
    c.record("h_2_homogeneous", Listed, h_scaling);

    // metric identities
    c.record(
        "g_yy_equals_f2",
        Listed,
        [scaled(
            sum(indices(n, 2)
                .into_iter()
                .map(|ix| pg.g[[ix[0], ix[1]]] * y[ix[0]] * y[ix[1]])),
            Sum::of(pg.f * pg.f),
        )],
    );
    c.record(
        "l_equals_g_y_over_f",
        Listed,
        (0..n).map(|i| {
            let rhs = sum((0..n).map(|j| pg.g[[i, j]] * y[j] / pg.f));
            scaled(Sum::of(pg.l[i]), rhs)
        }),
    );
    c.record(
        "cartan_y_contraction",
        Listed,
        indices(n, 2)
            .into_iter()
            .map(|ix| scaled(sum((0..n).map(|i| pg.c3[[i, ix[0], ix[1]]] * y[i])), Sum::default())),
    );

    // two paths to the spray: g^-1 H against 1/2 gamma y y
    let spray_gamma: Vec<Sum> = (0..n)
        .map(|i| {
            sum(indices(n, 2)
                .into_iter()
                .map(|ix| 0.5 * pg.gamma[[i, ix[0], ix[1]]] * y[ix[0]] * y[ix[1]]))
        })
        .collect();
    c.record(
        "h_equals_g_spray",
        Listed,
        (0..n).map(|i| {
            let rhs = sum((0..n).map(|r| pg.g[[i, r]] * spray_gamma[r].value));
            scaled(Sum::of(pg.h[i]), rhs)
        }),
    );
    c.record(
        "spray_equals_half_gamma_yy",
        Listed,
        (0..n).map(|i| scaled(Sum::of(pg.spray[i]), spray_gamma[i])),
    );

    // H_ij, H_ijk through the spray
    let t = pg.table();
    c.record(
        "h_ij_expansion",
        Listed,
        indices(n, 2).into_iter().map(|ix| {
            let (i, j) = (ix[0], ix[1]);
            let rhs = sum((0..n).map(|r| 0.5 * y[r] * pg.dx_g(r, i, j)))
                .add(0.25 * t.mixed(j, &[i]))
                .add(-0.25 * t.mixed(i, &[j]));
            scaled(Sum::of(pg.h2[[i, j]]), rhs)
        }),
    );
    c.record(
        "h_ijk_expansion",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            let (i, j, k) = (ix[0], ix[1], ix[2]);
            let rhs = sum((0..n).map(|r| y[r] * pg.dx_c3(r, i, j, k)))
                .add(0.5 * pg.dx_g(k, i, j))
                .add(0.5 * pg.dx_g(j, i, k))
                .add(-0.5 * pg.dx_g(i, j, k));
            scaled(Sum::of(pg.h3[[i, j, k]]), rhs)
        }),
    );

    // H^i_jk properties
    c.record(
        "h_up_gamma_decomposition",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            let (i, j, k) = (ix[0], ix[1], ix[2]);
            let rhs = sum(indices(n, 2)
                .into_iter()
                .map(|rh| pg.g_inv[[i, rh[0]]] * y[rh[1]] * pg.dx_c3(rh[1], rh[0], j, k)))
            .add(pg.gamma[[i, j, k]]);
            scaled(Sum::of(pg.h_up[[i, j, k]]), rhs)
        }),
    );
    c.record(
        "h_up_y_contraction",
        Listed,
        indices(n, 2).into_iter().map(|ix| {
            let (i, j) = (ix[0], ix[1]);
            let lhs = sum((0..n).map(|k| pg.h_up[[i, j, k]] * y[k]));
            let rhs = sum((0..n).map(|r| 2.0 * pg.spray[r] * pg.c_up(i, r, j))).add(pg.nonlinear[[i, j]]);
            scaled(lhs, rhs)
        }),
    );
    c.record(
        "h_up_yy_contraction",
        Listed,
        (0..n).map(|i| {
            let lhs = sum(indices(n, 2)
                .into_iter()
                .map(|jk| pg.h_up[[i, jk[0], jk[1]]] * y[jk[0]] * y[jk[1]]));
            scaled(lhs, Sum::of(2.0 * pg.spray[i]))
        }),
    );

    // H_ijkh properties
    c.record(
        "h_ijkh_symmetric",
        Listed,
        indices(n, 4).into_iter().flat_map(|ix| {
            let (i, j, k, h) = (ix[0], ix[1], ix[2], ix[3]);
            let base = Sum::of(pg.h4[[i, j, k, h]]);
            [(k, j, h), (j, h, k), (h, k, j), (k, h, j), (h, j, k)]
                .map(|(a, b, d)| scaled(base, Sum::of(pg.h4[[i, a, b, d]])))
        }),
    );
    c.record(
        "h_ijkh_cartan_form",
        Listed,
        indices(n, 4).into_iter().map(|ix| {
            let (i, j, k, h) = (ix[0], ix[1], ix[2], ix[3]);
            let rhs = sum((0..n).map(|r| y[r] * pg.dx_c4(r, i, j, k, h)))
                .add(pg.dx_c3(j, i, k, h))
                .add(pg.dx_c3(k, i, h, j))
                .add(pg.dx_c3(h, i, j, k))
                .add(-pg.dx_c3(i, j, k, h));
            scaled(Sum::of(pg.h4[[i, j, k, h]]), rhs)
        }),
    );
    let y_dx_c3 = |i: usize, j: usize, k: usize| sum((0..n).map(|r| y[r] * pg.dx_c3(r, i, j, k)));
    let h4_y_second = |i: usize, k: usize, h: usize| sum((0..n).map(|j| pg.h4[[i, j, k, h]] * y[j]));
    c.record(
        "h_ijkh_second_index_contraction",
        Listed,
        indices(n, 3)
            .into_iter()
            .map(|ix| scaled(h4_y_second(ix[0], ix[1], ix[2]), y_dx_c3(ix[0], ix[1], ix[2]))),
    );
    c.record(
        "h_landsberg_cartan_form",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            let (j, k, h) = (ix[0], ix[1], ix[2]);
            let lhs = sum((0..n).map(|i| y[i] * pg.h4[[i, j, k, h]]));
            scaled(lhs, scale_sum(y_dx_c3(j, k, h), -1.0))
        }),
    );
    c.record(
        "h_ijkh_second_index_contraction_vanishes",
        Corrected,
        indices(n, 3)
            .into_iter()
            .map(|ix| scaled(h4_y_second(ix[0], ix[1], ix[2]), Sum::default())),
    );
    c.record(
        "h_landsberg_cartan_form_factor_two",
        Corrected,
        indices(n, 3).into_iter().map(|ix| {
            let (j, k, h) = (ix[0], ix[1], ix[2]);
            let lhs = sum((0..n).map(|i| y[i] * pg.h4[[i, j, k, h]]));
            scaled(lhs, scale_sum(y_dx_c3(j, k, h), -2.0))
        }),
    );

    // S-scalar contraction
    let y_h = sum((0..n).map(|i| y[i] * pg.h[i]));
    c.record(
        "y_h_equals_three_candidate",
        Listed,
        [scaled(y_h, Sum::of(3.0 * pg.s_candidate))],
    );
    c.record(
        "y_h_equals_quarter_transport",
        Listed,
        [scaled(y_h, sum((0..n).map(|i| 0.25 * y[i] * pg.dx_f2(i))))],
    );

    // hv-Berwald candidates for the G_jikh term
    let lower = |a: usize, j: usize, k: usize, h: usize| {
        (0..n)
            .map(|r| pg.g[[a, r]] * pg.berwald_curvature[[r, j, k, h]])
            .sum::<f64>()
    };
    type Lowering = fn(usize, usize, usize, usize) -> [usize; 4];
    // (e) forms carry the coefficients of the C_rjkh G^r term and of the cyclic sum
    let candidates: [(&'static str, [(&'static str, f64, f64); 2], Lowering); 2] = [
        (
            "hv_berwald_d_lower_first",
            [
                ("hv_berwald_e_lower_first_literal", -4.0, -4.0),
                ("hv_berwald_e_lower_first_cyclic_two", -4.0, -2.0),
            ],
            |i, j, k, h| [i, j, k, h],
        ),
        (
            "hv_berwald_d_lower_second",
            [
                ("hv_berwald_e_lower_second_literal", -4.0, -4.0),
                ("hv_berwald_e_lower_second_cyclic_two", -4.0, -2.0),
            ],
            |i, j, k, h| [j, i, k, h],
        ),
    ];
    let d_rest = |i: usize, j: usize, k: usize, h: usize| {
        let five = sum((0..n).map(|r| 2.0 * pg.c5[[i, r, j, k, h]] * pg.spray[r]));
        let cyc = cyclic(j, k, h, |a, b, d| {
            sum((0..n).flat_map(|r| {
                [
                    2.0 * pg.c4[[i, r, a, b]] * pg.nonlinear[[r, d]],
                    2.0 * pg.c3[[i, r, a]] * pg.berwald[[r, b, d]],
                ]
            }))
        });
        merge(five, cyc)
    };
    let e_rest = |j: usize, k: usize, h: usize, c4_coeff: f64, cyc_coeff: f64| {
        let four = sum((0..n).map(|r| c4_coeff * pg.c4[[r, j, k, h]] * pg.spray[r]));
        let cyc = cyclic(j, k, h, |a, b, d| {
            sum((0..n).map(|r| cyc_coeff * pg.c3[[r, a, b]] * pg.nonlinear[[r, d]]))
        });
        merge(four, cyc)
    };
    for (d_name, e_forms, perm) in candidates {
        c.record(
            d_name,
            Investigation,
            indices(n, 4).into_iter().map(|ix| {
                let (i, j, k, h) = (ix[0], ix[1], ix[2], ix[3]);
                let [a, b, d, e] = perm(i, j, k, h);
                let rhs = d_rest(i, j, k, h).add(lower(a, b, d, e));
                scaled(Sum::of(pg.h4[[i, j, k, h]]), rhs)
            }),
        );
        for (name, c4_coeff, cyc_coeff) in e_forms {
            c.record(
                name,
                Investigation,
                indices(n, 3).into_iter().map(|ix| {
                    let (j, k, h) = (ix[0], ix[1], ix[2]);
                    let lhs = sum((0..n).map(|i| y[i] * pg.h4[[i, j, k, h]]));
                    let g_term = sum((0..n).map(|i| {
                        let [a, b, d, e] = perm(i, j, k, h);
                        y[i] * lower(a, b, d, e)
                    }));
                    scaled(lhs, merge(e_rest(j, k, h, c4_coeff, cyc_coeff), g_term))
                }),
            );
        }
    }

    if projective {
        projective_identities(&pg, &mut c, &delta);
    }
    Ok(c.out)
}

fn projective_identities(pg: &PointGeometry, c: &mut Collector, delta: &dyn Fn(usize, usize) -> f64) {
    use IdentityKind::*;
    let n = pg.dimension();
    let y = &pg.point.y;
    let yl = &pg.y_flat_g;
    let p = pg.p_factor;

    c.record(
        "projective_spray",
        Listed,
        (0..n).map(|i| scaled(Sum::of(pg.spray[i]), Sum::of(p * y[i]))),
    );
    c.record(
        "projective_h",
        Listed,
        (0..n).map(|i| scaled(Sum::of(pg.h[i]), Sum::of(p * yl[i]))),
    );
    c.record(
        "projective_h_ij",
        Listed,
        indices(n, 2).into_iter().map(|ix| {
            let (i, j) = (ix[0], ix[1]);
            scaled(Sum::of(pg.h2[[i, j]]), Sum::of(pg.p1[j] * yl[i]).add(p * pg.g[[i, j]]))
        }),
    );
    c.record(
        "projective_h_ijk",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            let (i, j, k) = (ix[0], ix[1], ix[2]);
            let rhs = Sum::of(pg.p2[[j, k]] * yl[i])
                .add(pg.p1[j] * pg.g[[i, k]])
                .add(pg.p1[k] * pg.g[[i, j]])
                .add(2.0 * p * pg.c3[[i, j, k]]);
            scaled(Sum::of(pg.h3[[i, j, k]]), rhs)
        }),
    );
    let h_up_y = |i: usize, j: usize| sum((0..n).map(|k| pg.h_up[[i, j, k]] * y[k]));
    c.record(
        "projective_h_up_y_two_p_delta",
        Listed,
        indices(n, 2)
            .into_iter()
            .map(|ix| scaled(h_up_y(ix[0], ix[1]), Sum::of(2.0 * p * delta(ix[0], ix[1])))),
    );
    c.record(
        "projective_h_up_y",
        Corrected,
        indices(n, 2).into_iter().map(|ix| {
            let (i, j) = (ix[0], ix[1]);
            scaled(h_up_y(i, j), Sum::of(pg.p1[j] * y[i]).add(p * delta(i, j)))
        }),
    );
    c.record(
        "projective_h_up_yy",
        Listed,
        (0..n).map(|i| {
            let lhs = sum(indices(n, 2)
                .into_iter()
                .map(|jk| pg.h_up[[i, jk[0], jk[1]]] * y[jk[0]] * y[jk[1]]));
            scaled(lhs, Sum::of(2.0 * p * y[i]))
        }),
    );
    let construction = |i: usize, j: usize, k: usize| {
        Sum::of(pg.p2[[j, k]] * y[i])
            .add(pg.p1[j] * delta(i, k))
            .add(pg.p1[k] * delta(i, j))
    };
    c.record(
        "projective_h_up_berwald_split",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            let (i, j, k) = (ix[0], ix[1], ix[2]);
            let rhs = Sum::of(pg.berwald[[i, j, k]]).add(2.0 * p * pg.c_up(i, j, k));
            scaled(Sum::of(pg.h_up[[i, j, k]]), rhs)
        }),
    );
    c.record(
        "projective_berwald_connection",
        Listed,
        indices(n, 3).into_iter().map(|ix| {
            scaled(
                Sum::of(pg.berwald[[ix[0], ix[1], ix[2]]]),
                construction(ix[0], ix[1], ix[2]),
            )
        }),
    );
}
