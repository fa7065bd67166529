//! Attention connectivity: causal, bidirectional and EOS-truncated masks.
//!
//! `allowed(i, j)` means query position `i` may attend to key position `j`,
//! so information flows from `j` into `i`.

use std::fmt::Write as _;
use std::ops::Range;

use crate::tensor::{Scalar, Tensor, NEG_SENTINEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    VisualA,
    TextA,
    EosBridge,
    TextB,
    Pad,
}

impl Role {
    pub fn is_block_a(self) -> bool {
        matches!(self, Role::VisualA | Role::TextA)
    }

    pub fn legend(self) -> char {
        match self {
            Role::VisualA => 'V',
            Role::TextA => 'T',
            Role::EosBridge => 'E',
            Role::TextB => 'B',
            Role::Pad => 'P',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    Bidirectional,
    Truncated,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("layout is empty")]
    Empty,
    #[error("truncated layout needs exactly one EOS bridge, found {0}")]
    BridgeCount(usize),
    #[error("role {role:?} at position {pos} is on the wrong side of the EOS bridge")]
    Order { pos: usize, role: Role },
    #[error("padding must be a contiguous suffix (position {0})")]
    PadNotSuffix(usize),
    #[error("bad layout spec {0:?}")]
    Spec(String),
}

/// Role tag per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<Role>,
}

/// Block boundaries recovered from a truncated-mode layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub block_a: Range<usize>,
    pub eos: usize,
    pub block_b: Range<usize>,
}

impl SequenceLayout {
    pub fn new(roles: Vec<Role>) -> Self {
        Self { roles }
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn positions(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| pred(**r)).map(|(i, _)| i).collect()
    }

    pub fn eos_positions(&self) -> Vec<usize> {
        self.positions(|r| r == Role::EosBridge)
    }

    fn check_pad_suffix(&self) -> Result<(), MaskError> {
        if let Some(first) = self.roles.iter().position(|&r| r == Role::Pad) {
            if let Some(bad) = self.roles[first..].iter().position(|&r| r != Role::Pad) {
                return Err(MaskError::PadNotSuffix(first + bad));
            }
        }
        Ok(())
    }

    /// Checks the "Block A ⟨EOS⟩ Block B [Pad…]" shape and returns its boundaries.
    pub fn blocks(&self) -> Result<Blocks, MaskError> {
        if self.roles.is_empty() {
            return Err(MaskError::Empty);
        }
        self.check_pad_suffix()?;
        let eos = self.eos_positions();
        if eos.len() != 1 {
            return Err(MaskError::BridgeCount(eos.len()));
        }
        let eos = eos[0];
        for (pos, &role) in self.roles.iter().enumerate() {
            let misplaced = (pos < eos && !role.is_block_a()) || (pos > eos && !matches!(role, Role::TextB | Role::Pad));
            if misplaced {
                return Err(MaskError::Order { pos, role });
            }
        }
        let end_b = self.roles.iter().position(|&r| r == Role::Pad).unwrap_or(self.len());
        Ok(Blocks { block_a: 0..eos, eos, block_b: eos + 1..end_b })
    }

    /// Parses a compact spec such as `A:2,T:1,EOS,B:3,P:1`.
    ///
    /// `A` is visual Block-A content, `T` Block-A text, `B` Block-B text and
    /// `P` padding; a bare tag means a count of one.
    pub fn parse_spec(spec: &str) -> Result<Self, MaskError> {
        let mut roles = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (tag, count) = match part.split_once(':') {
                Some((t, c)) => (t, c.parse::<usize>().map_err(|_| MaskError::Spec(part.to_string()))?),
                None => (part, 1),
            };
            let role = match tag {
                "A" | "V" => Role::VisualA,
                "T" => Role::TextA,
                "EOS" | "E" => Role::EosBridge,
                "B" => Role::TextB,
                "P" | "PAD" => Role::Pad,
                _ => return Err(MaskError::Spec(part.to_string())),
            };
            roles.extend(std::iter::repeat_n(role, count));
        }
        if roles.is_empty() {
            return Err(MaskError::Empty);
        }
        Ok(Self { roles })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
    mode: MaskMode,
}

impl AttentionMask {
    fn from_fn(n: usize, mode: MaskMode, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed, mode }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// Overrides one entry; used for fault injection.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.allowed[i * self.n + j] = value;
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allowed[i * self.n..(i + 1) * self.n].iter().filter(|&&a| a).count()
    }

    /// Additive form: 0 where allowed, [`NEG_SENTINEL`] where forbidden.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self.allowed.iter().map(|&a| if a { T::zero() } else { T::lit(NEG_SENTINEL) }).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square mask")
    }

    /// Copy with row and column `k` cleared (self-attention of `k` kept so
    /// its softmax row stays well-defined).
    pub fn without_node(&self, k: usize) -> Self {
        let mut m = self.clone();
        for t in 0..self.n {
            m.set(k, t, false);
            m.set(t, k, false);
        }
        m.set(k, k, true);
        m
    }

    /// `1`/`0` grid preceded by a role-legend header line.
    pub fn to_ascii(&self, layout: Option<&SequenceLayout>) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            MaskMode::Causal => "causal",
            MaskMode::Bidirectional => "bidirectional",
            MaskMode::Truncated => "truncated",
        };
        let legend: String = match layout {
            Some(l) => l.roles().iter().map(|r| r.legend()).collect(),
            None => "?".repeat(self.n),
        };
        let _ = writeln!(s, "# mode={mode} roles={legend} (V=visual-A T=text-A E=eos B=text-B P=pad)");
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    /// Plain portable graymap: 255 allowed, 0 forbidden.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n).map(|j| if self.allowed(i, j) { "255" } else { "0" }).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn build_causal(n: usize) -> Result<AttentionMask, MaskError> {
    if n == 0 {
        return Err(MaskError::Empty);
    }
    Ok(AttentionMask::from_fn(n, MaskMode::Causal, |i, j| j <= i))
}

/// Every non-pad position sees every non-pad position; pads see only themselves.
pub fn build_bidirectional(layout: &SequenceLayout) -> AttentionMask {
    let roles = layout.roles();
    AttentionMask::from_fn(layout.len(), MaskMode::Bidirectional, |i, j| {
        let (ri, rj) = (roles[i], roles[j]);
        if ri == Role::Pad || rj == Role::Pad {
            i == j
        } else {
            true
        }
    })
}

/// EOS-bridged truncation.
///
/// Block A and Block B are each fully connected internally and never see one
/// another. Every non-pad position reads the bridge; the bridge itself reads
/// only Block A (and itself), so it summarizes Block A alone and Block A
/// stays independent of Block B at every depth.
pub fn build_truncated(layout: &SequenceLayout) -> Result<AttentionMask, MaskError> {
    layout.blocks()?;
    let roles = layout.roles();
    Ok(AttentionMask::from_fn(layout.len(), MaskMode::Truncated, |i, j| {
        match (roles[i], roles[j]) {
            (Role::Pad, _) | (_, Role::Pad) => i == j,
            (a, b) if a.is_block_a() && b.is_block_a() => true,
            (Role::TextB, Role::TextB) => true,
            (_, Role::EosBridge) => true,
            (Role::EosBridge, b) => b.is_block_a(),
            _ => false,
        }
    }))
}

/// `closure[i][j]`: information at input position `j` can reach output
/// position `i` within `layers` attention steps (residual paths included).
pub fn reachability(mask: &AttentionMask, layers: usize) -> Vec<Vec<bool>> {
    let n = mask.len();
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..layers {
        let mut next = reach.clone();
        for (i, row) in next.iter_mut().enumerate() {
            for (_, from) in reach.iter().enumerate().filter(|&(m, _)| mask.allowed(i, m)) {
                for (cell, &r) in row.iter_mut().zip(from) {
                    *cell |= r;
                }
            }
        }
        reach = next;
    }
    reach
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsolationReport {
    pub passed: bool,
    /// Positions along the first bridge-avoiding path found, in information
    /// flow order (source first).
    pub violation: Option<Vec<usize>>,
}

type Side<'a> = dyn Fn(usize) -> bool + 'a;

/// Searches for any information path of at most `layers` hops between
/// Block A and Block B that avoids the EOS bridge.
pub fn verify_isolation(mask: &AttentionMask, layout: &SequenceLayout, layers: usize) -> Result<IsolationReport, MaskError> {
    let blocks = layout.blocks()?;
    let n = mask.len();
    let in_a = |p: usize| blocks.block_a.contains(&p);
    let in_b = |p: usize| blocks.block_b.contains(&p);
    // (source predicate, target predicate) for both flow directions
    let directions: [[&Side<'_>; 2]; 2] = [[&in_b, &in_a], [&in_a, &in_b]];
    for [is_source, is_target] in directions {
        for src in (0..n).filter(|&p| is_source(p)) {
            // BFS over flow edges j -> i (i attends to j), skipping the bridge.
            let mut parent: Vec<Option<usize>> = vec![None; n];
            let mut seen = vec![false; n];
            seen[src] = true;
            let mut frontier = vec![src];
            for _ in 0..layers {
                let mut next = Vec::new();
                for &j in &frontier {
                    for i in 0..n {
                        if seen[i] || i == blocks.eos || !mask.allowed(i, j) {
                            continue;
                        }
                        seen[i] = true;
                        parent[i] = Some(j);
                        if is_target(i) {
                            let mut path = vec![i];
                            let mut cur = i;
                            while let Some(p) = parent[cur] {
                                path.push(p);
                                cur = p;
                            }
                            path.reverse();
                            return Ok(IsolationReport { passed: false, violation: Some(path) });
                        }
                        next.push(i);
                    }
                }
                frontier = next;
            }
        }
    }
    Ok(IsolationReport { passed: true, violation: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Role::*;

    fn grid(m: &AttentionMask) -> Vec<String> {
        m.to_ascii(None).lines().skip(1).map(str::to_string).collect()
    }

    #[test]
    fn causal_examples() {
        assert_eq!(grid(&build_causal(3).unwrap()), ["100", "110", "111"]);
        assert_eq!(grid(&build_causal(1).unwrap()), ["1"]);
        assert_eq!(build_causal(0), Err(MaskError::Empty));
        let m = build_causal(16).unwrap();
        for i in 0..16 {
            assert_eq!(m.row_count(i), i + 1);
        }
    }

    #[test]
    fn bidirectional_isolates_pad() {
        let m = build_bidirectional(&SequenceLayout::new(vec![VisualA; 4]));
        assert!(grid(&m).iter().all(|r| r == "1111"));
        let m = build_bidirectional(&SequenceLayout::new(vec![VisualA, TextA, TextB, Pad]));
        assert_eq!(grid(&m), ["1110", "1110", "1110", "0001"]);
    }

    #[test]
    fn truncated_example_grid() {
        let layout = SequenceLayout::new(vec![VisualA, VisualA, EosBridge, TextB, TextB]);
        let m = build_truncated(&layout).unwrap();
        assert_eq!(grid(&m), ["11100", "11100", "11100", "00111", "00111"]);
        let small = build_truncated(&SequenceLayout::new(vec![VisualA, EosBridge, TextB])).unwrap();
        assert!(!small.allowed(0, 2) && !small.allowed(2, 0));
    }

    #[test]
    fn bridge_column_is_open_to_all_non_pad() {
        let layout = SequenceLayout::new(vec![VisualA, TextA, EosBridge, TextB, TextB, Pad]);
        let m = build_truncated(&layout).unwrap();
        for i in 0..5 {
            assert!(m.allowed(i, 2));
        }
        assert!(!m.allowed(5, 2) && !m.allowed(2, 5) && m.allowed(5, 5));
    }

    #[test]
    fn truncated_layout_errors() {
        let none = SequenceLayout::new(vec![VisualA, TextB]);
        assert_eq!(build_truncated(&none), Err(MaskError::BridgeCount(0)));
        let two = SequenceLayout::new(vec![VisualA, EosBridge, EosBridge, TextB]);
        assert_eq!(build_truncated(&two), Err(MaskError::BridgeCount(2)));
        let order = SequenceLayout::new(vec![VisualA, EosBridge, TextB, VisualA]);
        assert!(matches!(build_truncated(&order), Err(MaskError::Order { pos: 3, .. })));
        let pad = SequenceLayout::new(vec![VisualA, Pad, EosBridge, TextB]);
        assert!(matches!(build_truncated(&pad), Err(MaskError::PadNotSuffix(_)) | Err(MaskError::Order { .. })));
    }

    #[test]
    fn blocks_round_trip() {
        let layout = SequenceLayout::parse_spec("A:3,T:2,EOS,B:4,P:2").unwrap();
        let b = layout.blocks().unwrap();
        assert_eq!(b, Blocks { block_a: 0..5, eos: 5, block_b: 6..10 });
    }

    #[test]
    fn isolation_passes_and_detects_fault() {
        let layout = SequenceLayout::parse_spec("A:2,EOS,B:2").unwrap();
        let m = build_truncated(&layout).unwrap();
        assert!(verify_isolation(&m, &layout, 1).unwrap().passed);
        let mut bad = m.clone();
        bad.set(0, 3, true);
        let r = verify_isolation(&bad, &layout, 1).unwrap();
        assert!(!r.passed);
        assert_eq!(r.violation, Some(vec![3, 0]));
    }

    #[test]
    fn pgm_format() {
        let m = build_causal(2).unwrap();
        assert_eq!(m.to_pgm(), "P2\n2 2\n255\n255 0\n255 255\n");
    }

    #[test]
    fn additive_mask_values() {
        let m = build_causal(2).unwrap().additive::<f64>();
        assert_eq!(m.data(), &[0.0, NEG_SENTINEL, 0.0, 0.0]);
    }
}
