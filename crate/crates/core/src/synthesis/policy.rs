use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::io::{Dataset, Example};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    IntraClass,
    FullSet,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePolicy {
    pub kind: ReferenceKind,
    /// Pool size per target; only read by `Restricted`.
    pub referable_classes: Option<usize>,
    pub seed: u64,
}

impl ReferencePolicy {
    pub fn intra_class() -> Self {
        ReferencePolicy {
            kind: ReferenceKind::IntraClass,
            referable_classes: None,
            seed: 0,
        }
    }

    pub fn full_set() -> Self {
        ReferencePolicy {
            kind: ReferenceKind::FullSet,
            referable_classes: None,
            seed: 0,
        }
    }

    pub fn restricted(k: usize, seed: u64) -> Self {
        ReferencePolicy {
            kind: ReferenceKind::Restricted,
            referable_classes: Some(k),
            seed,
        }
    }

    pub fn check_strategy(&self, strategy: Strategy) -> Result<()> {
        check_pairing(self.kind, strategy)
    }
}

pub(crate) fn check_pairing(kind: ReferenceKind, strategy: Strategy) -> Result<()> {
    let ok = match strategy {
        Strategy::Gen => true,
        Strategy::Aug => kind == ReferenceKind::IntraClass,
        Strategy::Mix => kind != ReferenceKind::IntraClass,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("strategy {strategy} cannot use the {kind:?} reference policy")))
    }
}

/// Admissible reference indices per target class, resolved once per run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferencePools {
    kind: ReferenceKind,
    pools: Vec<Vec<usize>>,
    classes: Vec<Vec<ClassId>>,
}

impl ReferencePools {
    pub fn build(policy: &ReferencePolicy, trainset: &Dataset) -> Result<Self> {
        let n = trainset.num_classes;
        let mut by_class = vec![Vec::new(); n];
        for (i, e) in trainset.examples.iter().enumerate() {
            by_class[e.class.zero_based()].push(i);
        }
        let all: Vec<ClassId> = (0..n).map(ClassId::from_zero_based).collect();
        let classes: Vec<Vec<ClassId>> = match policy.kind {
            ReferenceKind::IntraClass => all.iter().map(|&c| vec![c]).collect(),
            ReferenceKind::FullSet => vec![all.clone(); n],
            ReferenceKind::Restricted => {
                let k = policy
                    .referable_classes
                    .ok_or_else(|| Error::invalid("restricted policy needs a referable class count"))?;
                if k == 0 || k > n {
                    return Err(Error::invalid(format!("referable class count {k} outside [1, {n}]")));
                }
                (0..n)
                    .map(|t| {
                        let mut rng = rng::stream(policy.seed, Stream::Pools, t as u64);
                        let mut pick: Vec<ClassId> =
                            index::sample(&mut rng, n, k).into_iter().map(ClassId::from_zero_based).collect();
                        pick.sort();
                        pick
                    })
                    .collect()
            }
        };
        let pools = classes
            .iter()
            .map(|cs| {
                let mut p: Vec<usize> = cs.iter().flat_map(|c| by_class[c.zero_based()].iter().copied()).collect();
                p.sort_unstable();
                p
            })
            .collect();
        Ok(ReferencePools { kind: policy.kind, pools, classes })
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    /// Classes a target may borrow references from.
    pub fn referable(&self, target: ClassId) -> &[ClassId] {
        &self.classes[target.zero_based()]
    }

    pub fn pool(&self, target: ClassId) -> &[usize] {
        &self.pools[target.zero_based()]
    }
}

/// Uniform draw from the target's admissible pool.
pub fn select_reference<'a>(
    target: ClassId,
    pools: &ReferencePools,
    trainset: &'a Dataset,
    rng: &mut Rng,
) -> Result<(&'a Example, ClassId)> {
    target.check(trainset.num_classes)?;
    let pool = pools.pool(target);
    if pool.is_empty() {
        return Err(Error::state(format!("no admissible reference for target class {target}")));
    }
    let e = &trainset.examples[pool[rng.random_range(0..pool.len())]];
    Ok((e, e.class))
}
