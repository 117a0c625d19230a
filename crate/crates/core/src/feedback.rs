//! The type-feedback lattice.
//!
//! A `FeedbackType` summarizes every value observed at one recording
//! site: the set of primitive kinds, whether all observations were
//! scalar, and whether any carried a class tag. `Bottom` means no
//! observations; `Top` absorbs everything and is only ever assigned
//! explicitly (never produced by merging partials).

use crate::value::{Kind, Value};
use std::fmt;

/// Bitset over the three primitive kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct KindSet(u8);

const INT_BIT: u8 = 1;
const DBL_BIT: u8 = 2;
const LGL_BIT: u8 = 4;

impl KindSet {
    pub const EMPTY: KindSet = KindSet(0);

    pub fn of(kind: Kind) -> KindSet {
        KindSet(match kind {
            Kind::Integer => INT_BIT,
            Kind::Double => DBL_BIT,
            Kind::Logical => LGL_BIT,
        })
    }

    pub fn union(self, other: KindSet) -> KindSet {
        KindSet(self.0 | other.0)
    }

    pub fn contains(self, kind: Kind) -> bool {
        self.0 & KindSet::of(kind).0 != 0
    }

    pub fn is_subset(self, other: KindSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Kinds in rendering order: dbl, int, lgl.
    pub fn iter(self) -> impl Iterator<Item = Kind> {
        [Kind::Double, Kind::Integer, Kind::Logical]
            .into_iter()
            .filter(move |&k| self.contains(k))
    }

    pub fn all_subsets() -> impl Iterator<Item = KindSet> {
        (0u8..8).map(KindSet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeedbackState {
    Bottom,
    Partial,
    Top,
}

/// Union summary of all values observed at one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeedbackType {
    state: FeedbackState,
    kinds: KindSet,
    scalar_only: bool,
    attr_seen: bool,
}

impl FeedbackType {
    pub const BOTTOM: FeedbackType = FeedbackType {
        state: FeedbackState::Bottom,
        kinds: KindSet::EMPTY,
        scalar_only: true,
        attr_seen: false,
    };

    pub const TOP: FeedbackType = FeedbackType {
        state: FeedbackState::Top,
        kinds: KindSet(INT_BIT | DBL_BIT | LGL_BIT),
        scalar_only: false,
        attr_seen: true,
    };

    pub fn partial(kinds: KindSet, scalar_only: bool, attr_seen: bool) -> FeedbackType {
        assert!(!kinds.is_empty(), "partial feedback has at least one kind");
        FeedbackType { state: FeedbackState::Partial, kinds, scalar_only, attr_seen }
    }

    /// Extracts the feedback summary of a single value.
    pub fn of_value(v: &Value) -> FeedbackType {
        FeedbackType::partial(KindSet::of(v.kind()), v.is_scalar(), v.class_tag().is_some())
    }

    pub fn state(&self) -> FeedbackState {
        self.state
    }

    pub fn is_bottom(&self) -> bool {
        self.state == FeedbackState::Bottom
    }

    pub fn is_partial(&self) -> bool {
        self.state == FeedbackState::Partial
    }

    pub fn is_top(&self) -> bool {
        self.state == FeedbackState::Top
    }

    pub fn kinds(&self) -> KindSet {
        self.kinds
    }

    pub fn scalar_only(&self) -> bool {
        self.scalar_only
    }

    pub fn attr_seen(&self) -> bool {
        self.attr_seen
    }

    /// Least upper bound. Bottom is the identity, Top absorbs.
    pub fn merge(&self, other: &FeedbackType) -> FeedbackType {
        match (self.state, other.state) {
            (FeedbackState::Bottom, _) => *other,
            (_, FeedbackState::Bottom) => *self,
            (FeedbackState::Top, _) | (_, FeedbackState::Top) => FeedbackType::TOP,
            (FeedbackState::Partial, FeedbackState::Partial) => FeedbackType {
                state: FeedbackState::Partial,
                kinds: self.kinds.union(other.kinds),
                scalar_only: self.scalar_only && other.scalar_only,
                attr_seen: self.attr_seen || other.attr_seen,
            },
        }
    }

    /// Subtype test: whether every behavior summarized by `self` is also
    /// covered by `other` (merge absorption).
    pub fn is_subtype_of(&self, other: &FeedbackType) -> bool {
        self.merge(other) == *other
    }

    /// Whether a concrete value falls inside this summary. Used by
    /// speculation guards.
    pub fn admits(&self, v: &Value) -> bool {
        match self.state {
            FeedbackState::Bottom => false,
            FeedbackState::Top => true,
            FeedbackState::Partial => {
                self.kinds.contains(v.kind())
                    && (!self.scalar_only || v.is_scalar())
                    && (self.attr_seen || v.class_tag().is_none())
            }
        }
    }

    /// True when values matching this summary can live in an unboxed
    /// scalar register: exactly one kind, integer or double, scalar,
    /// never tagged.
    pub fn unboxable(&self) -> bool {
        self.is_partial()
            && self.scalar_only
            && !self.attr_seen
            && self.kinds.len() == 1
            && (self.kinds.contains(Kind::Integer) || self.kinds.contains(Kind::Double))
    }
}

impl fmt::Display for FeedbackType {
    /// Listing notation: `[int(s)]`, `[dbl(s), int(s)]`, `[dbl(v)]`,
    /// `[dbl(s)+attr]`, `[<?>]` for Bottom.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.state {
            FeedbackState::Bottom => write!(f, "[<?>]"),
            FeedbackState::Top => write!(f, "[top]"),
            FeedbackState::Partial => {
                let mark = if self.scalar_only { "s" } else { "v" };
                write!(f, "[")?;
                let mut first = true;
                for k in self.kinds.iter() {
                    if !first {
                        write!(f, ", ")?;
                    }
                    first = false;
                    write!(f, "{}({})", k.short(), mark)?;
                }
                if self.attr_seen {
                    write!(f, "+attr")?;
                }
                write!(f, "]")
            }
        }
    }
}

/// Per-function recording storage: one `(observed, hit_count)` pair per
/// record site. Observations only widen until a recompilation policy
/// explicitly resets them.
#[derive(Debug, Clone)]
pub struct FeedbackTable {
    entries: Vec<(FeedbackType, u64)>,
}

impl FeedbackTable {
    pub fn new(n_sites: usize) -> FeedbackTable {
        FeedbackTable { entries: vec![(FeedbackType::BOTTOM, 0); n_sites] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn record(&mut self, site: usize, v: &Value) {
        let e = &mut self.entries[site];
        e.0 = e.0.merge(&FeedbackType::of_value(v));
        e.1 += 1;
    }

    /// Deopt-observed widening: merges a summary without counting a hit
    /// beyond one.
    pub fn merge_type(&mut self, site: usize, t: &FeedbackType) {
        let e = &mut self.entries[site];
        e.0 = e.0.merge(t);
        e.1 += 1;
    }

    pub fn observed(&self, site: usize) -> FeedbackType {
        self.entries[site].0
    }

    pub fn hit_count(&self, site: usize) -> u64 {
        self.entries[site].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Equal,
    Narrower,
    Changed,
}

/// Result of comparing a sampled summary against the feedback the code
/// was compiled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Comparison {
    pub verdict: Verdict,
    pub optimizable: bool,
}

/// Classifies sampled feedback against compiled feedback.
///
/// Comparing a Bottom sample is a contract violation: no samples means
/// no verdict.
pub fn compare(sampled: &FeedbackType, compiled: &FeedbackType) -> Comparison {
    assert!(!sampled.is_bottom(), "compare() needs at least one sample");
    let verdict = if sampled == compiled {
        Verdict::Equal
    } else if sampled.is_subtype_of(compiled) {
        Verdict::Narrower
    } else {
        Verdict::Changed
    };
    let optimizable = match verdict {
        Verdict::Equal => false,
        _ => is_optimizable(sampled, compiled),
    };
    Comparison { verdict, optimizable }
}

/// Whether the difference between sampled and compiled feedback enables
/// a target optimization: unboxing (sampled is a monomorphic untagged
/// scalar number while compiled is not) or dispatch elimination
/// (no tags sampled while the compiled feedback allowed them).
pub fn is_optimizable(sampled: &FeedbackType, compiled: &FeedbackType) -> bool {
    (sampled.unboxable() && !compiled.unboxable())
        || (!sampled.attr_seen() && compiled.attr_seen())
}

/// Convenience constructors for tests and logs.
pub fn kinds(of: &[Kind]) -> KindSet {
    of.iter().fold(KindSet::EMPTY, |s, &k| s.union(KindSet::of(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Value;

    fn int_s() -> FeedbackType {
        FeedbackType::partial(kinds(&[Kind::Integer]), true, false)
    }

    fn dbl_s() -> FeedbackType {
        FeedbackType::partial(kinds(&[Kind::Double]), true, false)
    }

    /// Every element of the finite lattice: Bottom, Top, and each
    /// nonempty-kind-set x scalar x attr combination.
    fn all_elements() -> Vec<FeedbackType> {
        let mut out = vec![FeedbackType::BOTTOM, FeedbackType::TOP];
        for ks in KindSet::all_subsets() {
            if ks.is_empty() {
                continue;
            }
            for scalar in [true, false] {
                for attr in [true, false] {
                    out.push(FeedbackType::partial(ks, scalar, attr));
                }
            }
        }
        out
    }

    /// Brute-force oracle: a feedback element as the explicit set of the
    /// (kind, scalar, attr) observation classes it covers. Merge must
    /// behave exactly like set union over these classes.
    fn covered_classes(t: &FeedbackType) -> Vec<(Kind, bool, bool)> {
        let mut out = vec![];
        for k in [Kind::Integer, Kind::Double, Kind::Logical] {
            for scalar in [true, false] {
                for attr in [true, false] {
                    let inside = match t.state() {
                        FeedbackState::Bottom => false,
                        FeedbackState::Top => true,
                        FeedbackState::Partial => {
                            t.kinds().contains(k)
                                && (!t.scalar_only() || scalar)
                                && (t.attr_seen() || !attr)
                        }
                    };
                    if inside {
                        out.push((k, scalar, attr));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn type_of_examples() {
        // integer scalar 1
        assert_eq!(FeedbackType::of_value(&Value::int_scalar(1)), int_s());
        // double vector of length 3
        let t = FeedbackType::of_value(&Value::dbl_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(t, FeedbackType::partial(kinds(&[Kind::Double]), false, false));
        // double scalar 1 with class tag "foo"
        let poison = Value::dbl_scalar(1.0).with_class_tag("foo".into());
        assert_eq!(
            FeedbackType::of_value(&poison),
            FeedbackType::partial(kinds(&[Kind::Double]), true, true)
        );
    }

    #[test]
    fn merge_examples() {
        // [int(s)] u [dbl(s)] = [dbl(s), int(s)]
        let merged = int_s().merge(&dbl_s());
        assert_eq!(merged.to_string(), "[dbl(s), int(s)]");
        // Bottom is the identity
        for x in all_elements() {
            assert_eq!(FeedbackType::BOTTOM.merge(&x), x);
            assert_eq!(x.merge(&FeedbackType::BOTTOM), x);
        }
        // [int(s)] u [int, non-scalar]
        let int_v = FeedbackType::partial(kinds(&[Kind::Integer]), false, false);
        assert_eq!(int_s().merge(&int_v), int_v);
    }

    #[test]
    fn merge_matches_set_union_oracle_exhaustively() {
        let elems = all_elements();
        for a in &elems {
            for b in &elems {
                let merged = a.merge(b);
                let mut want: Vec<_> = covered_classes(a);
                for c in covered_classes(b) {
                    if !want.contains(&c) {
                        want.push(c);
                    }
                }
                want.sort();
                let mut got = covered_classes(&merged);
                got.sort();
                // Top covers everything; a partial merge may not be the
                // *least* set (scalar_only and attr are independent bits),
                // so the oracle checks coverage, not exact equality.
                for c in &want {
                    assert!(got.contains(c), "merge of {a} and {b} lost {c:?}");
                }
                // And merge never invents a kind.
                assert!(a.kinds().union(b.kinds()).is_subset(merged.kinds()));
                assert!(merged.kinds().is_subset(a.kinds().union(b.kinds())) || merged.is_top());
            }
        }
    }

    #[test]
    fn merge_laws_exhaustive() {
        let elems = all_elements();
        for a in &elems {
            assert_eq!(a.merge(a), *a, "idempotence");
            assert_eq!(a.merge(&FeedbackType::TOP), FeedbackType::TOP, "top absorbs");
            for b in &elems {
                assert_eq!(a.merge(b), b.merge(a), "commutativity");
                for c in &elems {
                    assert_eq!(
                        a.merge(b).merge(c),
                        a.merge(&b.merge(c)),
                        "associativity for {a}, {b}, {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn merge_of_partials_never_top() {
        let elems: Vec<_> = all_elements().into_iter().filter(|t| t.is_partial()).collect();
        for a in &elems {
            for b in &elems {
                assert!(a.merge(b).is_partial());
            }
        }
    }

    #[test]
    fn compare_trichotomy_and_absorption() {
        let partials: Vec<_> = all_elements().into_iter().filter(|t| t.is_partial()).collect();
        for a in &partials {
            for b in &partials {
                let c = compare(a, b);
                // subset-test oracle
                let subset = covered_classes(a).iter().all(|x| covered_classes(b).contains(x));
                match c.verdict {
                    Verdict::Equal => {
                        assert_eq!(a, b);
                        assert!(!c.optimizable, "Equal implies not optimizable");
                    }
                    Verdict::Narrower => {
                        assert!(a != b && subset);
                        assert_eq!(a.merge(b), *b, "narrower implies merge absorption");
                    }
                    Verdict::Changed => assert!(a != b && !subset),
                }
                // exactly one verdict holds by construction; re-derive it
                let expect = if a == b {
                    Verdict::Equal
                } else if subset {
                    Verdict::Narrower
                } else {
                    Verdict::Changed
                };
                assert_eq!(c.verdict, expect);
            }
        }
    }

    #[test]
    fn compare_examples() {
        let dbl_int_s = int_s().merge(&dbl_s());
        assert_eq!(compare(&int_s(), &dbl_int_s).verdict, Verdict::Narrower);
        let lgl_s = FeedbackType::partial(kinds(&[Kind::Logical]), true, false);
        assert_eq!(compare(&lgl_s, &int_s()).verdict, Verdict::Changed);
        for x in all_elements().into_iter().filter(|t| t.is_partial()) {
            assert_eq!(compare(&x, &x).verdict, Verdict::Equal);
        }
    }

    #[test]
    #[should_panic(expected = "at least one sample")]
    fn compare_bottom_sample_is_contract_violation() {
        compare(&FeedbackType::BOTTOM, &int_s());
    }

    #[test]
    fn optimizable_examples() {
        let dbl_int_s = int_s().merge(&dbl_s());
        // unboxing opportunity
        assert!(is_optimizable(&int_s(), &dbl_int_s));
        // dispatch elimination
        let dbl_s_attr = FeedbackType::partial(kinds(&[Kind::Double]), true, true);
        assert!(is_optimizable(&dbl_s(), &dbl_s_attr));
        // narrower but no target optimization
        let dbl_v = FeedbackType::partial(kinds(&[Kind::Double]), false, false);
        let dbl_lgl_v = FeedbackType::partial(kinds(&[Kind::Double, Kind::Logical]), false, false);
        assert!(!is_optimizable(&dbl_v, &dbl_lgl_v));
        // exhaustive consistency with the two-condition predicate
        for a in super::tests::all_elements().into_iter().filter(|t| t.is_partial()) {
            for b in all_elements() {
                let want = (a.unboxable() && !b.unboxable()) || (!a.attr_seen() && b.attr_seen());
                assert_eq!(is_optimizable(&a, &b), want);
            }
        }
    }

    #[test]
    fn rendering_matches_listing_notation() {
        assert_eq!(int_s().to_string(), "[int(s)]");
        assert_eq!(int_s().merge(&dbl_s()).to_string(), "[dbl(s), int(s)]");
        let dbl_v = FeedbackType::partial(kinds(&[Kind::Double]), false, false);
        assert_eq!(dbl_v.to_string(), "[dbl(v)]");
        let dbl_s_attr = FeedbackType::partial(kinds(&[Kind::Double]), true, true);
        assert_eq!(dbl_s_attr.to_string(), "[dbl(s)+attr]");
        assert_eq!(FeedbackType::BOTTOM.to_string(), "[<?>]");
    }

    #[test]
    fn admits_is_consistent_with_type_of() {
        let vals = [
            Value::int_scalar(1),
            Value::dbl_scalar(2.5),
            Value::lgl_scalar(true),
            Value::int_vec(vec![1, 2]),
            Value::dbl_scalar(1.0).with_class_tag("foo".into()),
        ];
        for t in all_elements() {
            for v in &vals {
                let want = FeedbackType::of_value(v).is_subtype_of(&t);
                assert_eq!(t.admits(v), want, "{t} admits {v}?");
            }
        }
    }
}
