//! Structural analysis of the boundary-reachability and duration-compatibility
//! patterns: bandwidth, clique lower bounds, boolean-power fill-in and
//! reorder-and-measure experiments.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Square structural-nonzero pattern.
#[derive(Clone, PartialEq, Eq)]
pub struct BooleanMatrix {
    n: usize,
    cells: Vec<bool>,
}

impl fmt::Debug for BooleanMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BooleanMatrix({}x{}, nnz={})", self.n, self.n, self.nnz())?;
        for i in 0..self.n.min(32) {
            let row: String = (0..self.n.min(64))
                .map(|j| if self.get(i, j) { '#' } else { '.' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl BooleanMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            cells: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.cells[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[i * self.n + j] = value;
    }

    pub fn nnz(&self) -> usize {
        self.cells.iter().filter(|&&x| x).count()
    }

    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(move |(idx, _)| (idx / self.n, idx % self.n))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    /// Pattern of `self ∨ selfᵀ`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(i, j) || self.get(j, i))
    }

    /// Boolean-semiring product.
    pub fn multiply(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for l in 0..n {
                if !self.get(i, l) {
                    continue;
                }
                let (src, dst) = (&other.cells[l * n..(l + 1) * n], &mut out.cells[i * n..(i + 1) * n]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        out
    }

    /// `P M Pᵀ` where `order[new] = old`.
    pub fn permute(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.n, "ordering length mismatch");
        Self::from_fn(self.n, |i, j| self.get(order[i], order[j]))
    }

    pub fn bandwidth(&self) -> usize {
        bandwidth(self)
    }
}

/// Maximum `|i - j|` over structural nonzeros; 0 for empty or diagonal patterns.
pub fn bandwidth(m: &BooleanMatrix) -> usize {
    m.nonzeros().map(|(i, j)| i.abs_diff(j)).max().unwrap_or(0)
}

/// Bandwidth of `m` under `order` without materializing the permutation.
pub fn bandwidth_under(m: &BooleanMatrix, order: &[usize]) -> usize {
    let mut pos = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    m.nonzeros().map(|(i, j)| pos[i].abs_diff(pos[j])).max().unwrap_or(0)
}

/// Boundary reachability over positions `0..=T`: `B[i, j] = 1` iff `1 <= j - i <= K`.
pub fn reachability_matrix(t: usize, k: usize) -> BooleanMatrix {
    BooleanMatrix::from_fn(t + 1, |i, j| j > i && j - i <= k)
}

/// Compatibility of adjacent segments within a span of `S` positions.
///
/// States are `(d, y)` with `d in 1..=min(K, S)`, flattened duration-major as
/// `(d - 1) * C + y`; `(d1, y1) ~ (d2, y2)` iff `d1 + d2 <= S`.
pub fn duration_compat_matrix(span: usize, k: usize, c: usize) -> BooleanMatrix {
    let d_max = k.min(span);
    BooleanMatrix::from_fn(d_max * c, |i, j| (i / c + 1) + (j / c + 1) <= span)
}

/// `C * floor(S / 2) - 1`: the states with `d <= S / 2` form a clique.
pub fn clique_lower_bound(span: usize, c: usize) -> i64 {
    (c * (span / 2)) as i64 - 1
}

/// `B^m` by repeated boolean products.
pub fn boolean_power(t: usize, k: usize, m: usize) -> BooleanMatrix {
    assert!(m >= 1, "power must be at least 1");
    let b = reachability_matrix(t, k);
    let mut acc = b.clone();
    for _ in 1..m {
        acc = acc.multiply(&b);
    }
    acc
}

pub fn boolean_power_bandwidth(t: usize, k: usize, m: usize) -> usize {
    bandwidth(&boolean_power(t, k, m))
}

/// Reverse Cuthill-McKee on the pattern of `m ∨ mᵀ`, returning `order[new] = old`.
///
/// Each connected component starts from its minimum-degree vertex (ties by
/// index); neighbours are queued by ascending degree, then index. Components
/// are processed in order of their start vertex and each is reversed in place.
pub fn rcm_ordering(m: &BooleanMatrix) -> Vec<usize> {
    let n = m.dim();
    let sym = m.symmetrized();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && sym.get(i, j)).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some(start) = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree[v], v)) {
        let mut component = Vec::new();
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            component.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
        component.reverse();
        order.extend(component);
    }
    order
}

/// Minimum bandwidth over all `n!` orderings; `n <= 9`.
pub fn exhaustive_min_bandwidth(m: &BooleanMatrix) -> usize {
    let n = m.dim();
    assert!(n <= 9, "exhaustive search limited to n <= 9");
    let sym = m.symmetrized();
    let edges: Vec<(usize, usize)> = sym.nonzeros().filter(|(i, j)| i < j).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = usize::MAX;
    // Heap's algorithm.
    let mut counters = vec![0; n];
    let eval = |order: &[usize]| {
        let mut pos = vec![0; n];
        for (p, &v) in order.iter().enumerate() {
            pos[v] = p;
        }
        edges.iter().map(|&(i, j)| pos[i].abs_diff(pos[j])).max().unwrap_or(0)
    };
    best = best.min(eval(&order));
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(counters[i], i);
            }
            best = best.min(eval(&order));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Identity,
    Rcm,
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Rcm => "rcm",
        })
    }
}

/// Span relative to the maximum duration. `S == K` is classed as moderate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanClass {
    /// `S <= K / 2`
    Small,
    /// `K / 2 < S <= K`
    Moderate,
    /// `S > K`
    Large,
}

impl SpanClass {
    pub fn of(span: usize, k: usize) -> Self {
        if 2 * span <= k {
            Self::Small
        } else if span <= k {
            Self::Moderate
        } else {
            Self::Large
        }
    }
}

impl fmt::Display for SpanClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Small => "small",
            Self::Moderate => "moderate",
            Self::Large => "large",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    #[serde(rename = "S")]
    pub span: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub n: usize,
    pub ordering: Ordering,
    pub bw: usize,
    pub ratio: f64,
    pub span_class: SpanClass,
}

/// `bw / (n - 1)`, defined as 0 when the pattern has no off-diagonal reach.
pub fn bandwidth_ratio(bw: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        bw as f64 / (n - 1) as f64
    }
}

/// Identity and RCM bandwidths of the compatibility pattern for each span.
pub fn rcm_bandwidth_report(spans: &[usize], k: usize, c: usize) -> Vec<BandwidthRow> {
    let mut rows = Vec::with_capacity(2 * spans.len());
    for &span in spans {
        let m = duration_compat_matrix(span, k, c);
        let n = m.dim();
        let identity: Vec<usize> = (0..n).collect();
        for (ordering, order) in [(Ordering::Identity, identity), (Ordering::Rcm, rcm_ordering(&m))] {
            let bw = bandwidth_under(&m, &order);
            rows.push(BandwidthRow {
                span,
                k,
                c,
                n,
                ordering,
                bw,
                ratio: if m.nnz() == 0 { 0.0 } else { bandwidth_ratio(bw, n) },
                span_class: SpanClass::of(span, k),
            });
        }
    }
    rows
}

/// Smallest ratio reached by any ordering, per span class.
pub fn best_ratio_by_class(rows: &[BandwidthRow]) -> Vec<(SpanClass, f64, f64)> {
    let mut spans: Vec<(SpanClass, usize, usize, usize)> =
        rows.iter().map(|r| (r.span_class, r.span, r.k, r.c)).collect();
    spans.sort_unstable();
    spans.dedup();
    let mut out: Vec<(SpanClass, f64, f64)> = Vec::new();
    for (class, span, k, c) in spans {
        let best = rows
            .iter()
            .filter(|r| (r.span, r.k, r.c) == (span, k, c))
            .map(|r| r.ratio)
            .fold(f64::INFINITY, f64::min);
        match out.last_mut() {
            Some((cl, lo, hi)) if *cl == class => {
                *lo = lo.min(best);
                *hi = hi.max(best);
            }
            _ => out.push((class, best, best)),
        }
    }
    out
}
