//! All mixed partials of `F^2` a site needs, from a handful of jet lifts.
//!
//! One lift seeded on a sorted multiset `M` of fiber variables yields the
//! derivative for every sub-multiset of `M` at once, so lifting only the
//! maximal multisets fills the whole table.

use crate::error::Result;
use crate::expr::{Expr, Var};
use crate::jets::lift;

use super::ChartPoint;

#[derive(Debug, Clone)]
pub struct DerivativeTable {
    n: usize,
    fiber_order: usize,
    mixed_order: usize,
    /// Fiber-only derivatives, keyed by multiset.
    fiber: Vec<f64>,
    /// `mixed[r]` holds `d_r` combined with fiber multisets.
    mixed: Vec<Vec<f64>>,
}

/// Every sorted multiset of `0..n` with exactly `len` elements.
pub(crate) fn multisets(n: usize, len: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, len: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, len, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, len, 0, &mut Vec::with_capacity(len), &mut out);
    out
}

impl DerivativeTable {
    /// Lifts `f2` at `p`: fiber derivatives up to `fiber_order`, and one
    /// position derivative combined with up to `mixed_order` fiber ones.
    pub fn build(f2: &Expr, p: &ChartPoint, fiber_order: usize, mixed_order: usize) -> Result<Self> {
        let n = p.dimension();
        let slots = |order: usize| (n + 1).pow(order as u32);
        let mut table = DerivativeTable {
            n,
            fiber_order,
            mixed_order,
            fiber: vec![f64::NAN; slots(fiber_order)],
            mixed: vec![vec![f64::NAN; slots(mixed_order)]; n],
        };

        for m in multisets(n, fiber_order) {
            let seeds: Vec<Var> = m.iter().map(|&i| Var::y(i + 1)).collect();
            let jet = lift(f2, &p.x, &p.y, &seeds)?;
            for (mask, value) in jet.coeffs().iter().enumerate() {
                let key = table.key_of_mask(&m, mask);
                table.fiber[key] = *value;
            }
        }
        for r in 0..n {
            for m in multisets(n, mixed_order) {
                let mut seeds: Vec<Var> = m.iter().map(|&i| Var::y(i + 1)).collect();
                seeds.push(Var::x(r + 1));
                let jet = lift(f2, &p.x, &p.y, &seeds)?;
                let x_bit = 1 << m.len();
                for mask in 0..x_bit {
                    let key = table.key_of_mask(&m, mask);
                    table.mixed[r][key] = jet.coeff(mask | x_bit);
                }
            }
        }
        Ok(table)
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn fiber_order(&self) -> usize {
        self.fiber_order
    }

    pub fn mixed_order(&self) -> usize {
        self.mixed_order
    }

    fn key_of_mask(&self, m: &[usize], mask: usize) -> usize {
        let mut key = 0;
        let mut place = 1;
        for (t, &i) in m.iter().enumerate() {
            if mask & (1 << t) != 0 {
                key += (i + 1) * place;
                place *= self.n + 1;
            }
        }
        key
    }

    fn key(&self, idx: &[usize]) -> usize {
        let mut sorted = [0usize; 8];
        let k = idx.len();
        sorted[..k].copy_from_slice(idx);
        sorted[..k].sort_unstable();
        sorted[..k].iter().rev().fold(0, |acc, &i| acc * (self.n + 1) + i + 1)
    }

    /// `d^|idx| F^2 / dy^idx` (0-based indices, any order).
    pub fn fiber(&self, idx: &[usize]) -> f64 {
        assert!(idx.len() <= self.fiber_order, "fiber order {} not tabulated", idx.len());
        self.fiber[self.key(idx)]
    }

    /// `d_r d^|idx| F^2 / dy^idx`.
    pub fn mixed(&self, r: usize, idx: &[usize]) -> f64 {
        assert!(idx.len() <= self.mixed_order, "mixed order {} not tabulated", idx.len());
        self.mixed[r][self.key(idx)]
    }

    /// Every tabulated request as (position index or none, sorted fiber
    /// multiset), for oracle sweeps.
    pub fn entries(&self) -> Vec<(Option<usize>, Vec<usize>, f64)> {
        let mut out = Vec::new();
        for len in 0..=self.fiber_order {
            for m in multisets(self.n, len) {
                out.push((None, m.clone(), self.fiber(&m)));
            }
        }
        for r in 0..self.n {
            for len in 0..=self.mixed_order {
                for m in multisets(self.n, len) {
                    out.push((Some(r), m.clone(), self.mixed(r, &m)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_metric;
    use crate::jets::{mixed_partial, DerivativeRequest};

    #[test]
    fn multiset_counts() {
        assert_eq!(multisets(3, 2).len(), 6);
        assert_eq!(multisets(4, 5).len(), 56);
        assert_eq!(multisets(2, 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn table_matches_direct_requests() {
        let f2 = parse_metric("(sqrt(y1^2+2*y2^2) + x1*y2)^2 + x2*y1^3/y2", 2).unwrap();
        let p = ChartPoint::new(vec![0.2, -0.3], vec![1.1, 0.7]).unwrap();
        let t = DerivativeTable::build(&f2, &p, 4, 3).unwrap();
        for (r, m, v) in t.entries() {
            let mut vars: Vec<Var> = m.iter().map(|&i| Var::y(i + 1)).collect();
            if let Some(r) = r {
                vars.push(Var::x(r + 1));
            }
            let req = DerivativeRequest::new(p.clone(), vars).unwrap();
            let direct = mixed_partial(&f2, &req).unwrap();
            assert!((direct - v).abs() <= 1e-12 * direct.abs().max(1.0), "{r:?} {m:?}");
        }
        assert_eq!(t.fiber(&[1, 0]), t.fiber(&[0, 1]));
    }
}
