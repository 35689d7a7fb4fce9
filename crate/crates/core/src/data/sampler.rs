//! Batch samplers: a seeded random permutation, and a stratified sampler
//! that gives every batch the same number of instances per class so a
//! contrastive loss always finds positives.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    #[default]
    Random,
    Stratified,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Random => "random",
            SamplerKind::Stratified => "stratified",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplerKind::Random),
            "stratified" => Ok(SamplerKind::Stratified),
            other => Err(Error::config(format!("unknown sampler '{other}' (random|stratified)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub kind: SamplerKind,
    pub classes_per_batch: Option<usize>,
    pub instances_per_class: Option<usize>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Seeded permutation of `0..labels.len()` cut into `batch_size` chunks;
/// the last chunk may be short.
pub fn random_batches(labels: &[usize], batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut rng = SeedTree::new(seed).rng(Stream::Sampler);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    Ok(BatchPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        kind: SamplerKind::Random,
        classes_per_batch: None,
        instances_per_class: None,
    })
}

/// `k` distinct members of `members`, drawn uniformly.
fn draw_group(members: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    index::sample(rng, members.len(), k)
        .into_iter()
        .map(|i| members[i])
        .collect()
}

/// One epoch of batches holding exactly `instances_per_class` samples from
/// each of `classes_per_batch` distinct classes.
///
/// Each class's samples are shuffled and cut into groups of
/// `instances_per_class`; a short final group is topped up with other
/// members of the same class. Groups are dealt round by round (every class
/// once per round, shuffled) into batches without repeating a class inside
/// a batch. When the groups run out, the last batch is completed with
/// freshly drawn groups from classes it does not contain yet.
pub fn stratified_batches(
    labels: &[usize],
    classes_per_batch: usize,
    instances_per_class: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if instances_per_class < 2 {
        return Err(Error::config(format!(
            "instances_per_class {instances_per_class} < 2 leaves the contrastive loss without positives"
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    if classes_per_batch == 0 || classes_per_batch > members.len() {
        return Err(Error::config(format!(
            "classes_per_batch {classes_per_batch} must be in 1..={}",
            members.len()
        )));
    }
    if let Some((c, m)) = members.iter().find(|(_, m)| m.len() < instances_per_class) {
        return Err(Error::config(format!(
            "class {c} has {} samples, fewer than instances_per_class {instances_per_class}",
            m.len()
        )));
    }

    let mut rng = SeedTree::new(seed).rng(Stream::Sampler);
    let k = instances_per_class;
    let mut groups: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&c, m) in &members {
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        let mut gs: Vec<Vec<usize>> = shuffled.chunks(k).map(<[usize]>::to_vec).collect();
        let last = gs.last_mut().expect("class has members");
        let mut fill = shuffled.iter();
        while last.len() < k {
            let candidate = *fill.next().expect("class has at least k members");
            if !last.contains(&candidate) {
                last.push(candidate);
            }
        }
        groups.insert(c, gs);
    }

    let rounds = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut queue: VecDeque<(usize, Vec<usize>)> = VecDeque::new();
    for r in 0..rounds {
        let mut round: Vec<usize> = groups.iter().filter(|(_, g)| g.len() > r).map(|(&c, _)| c).collect();
        round.shuffle(&mut rng);
        for c in round {
            queue.push_back((c, groups[&c][r].clone()));
        }
    }

    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut classes: Vec<usize> = Vec::with_capacity(classes_per_batch);
        let mut batch: Vec<usize> = Vec::with_capacity(classes_per_batch * k);
        let mut deferred = Vec::new();
        while classes.len() < classes_per_batch {
            let Some((c, g)) = queue.pop_front() else { break };
            if classes.contains(&c) {
                deferred.push((c, g));
            } else {
                classes.push(c);
                batch.extend(g);
            }
        }
        for item in deferred.into_iter().rev() {
            queue.push_front(item);
        }
        if classes.len() < classes_per_batch {
            let mut spare: Vec<usize> = members.keys().copied().filter(|c| !classes.contains(c)).collect();
            spare.shuffle(&mut rng);
            for c in spare.into_iter().take(classes_per_batch - classes.len()) {
                batch.extend(draw_group(&members[&c], k, &mut rng));
                classes.push(c);
            }
        }
        batches.push(batch);
    }

    Ok(BatchPlan {
        batches,
        kind: SamplerKind::Stratified,
        classes_per_batch: Some(classes_per_batch),
        instances_per_class: Some(instances_per_class),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    #[test]
    fn random_plan_shapes() {
        let l = vec![0; 30];
        let p = random_batches(&l, 8, 1).unwrap();
        let sizes: Vec<usize> = p.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 8, 8, 6]);
        assert_eq!(p, random_batches(&l, 8, 1).unwrap());
        let mut all: Vec<usize> = p.batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert!(random_batches(&l, 0, 1).is_err());
    }

    #[test]
    fn eight_by_three_gives_24() {
        let l = labels(10, 5);
        let p = stratified_batches(&l, 8, 3, 0).unwrap();
        assert!(p.batches.iter().all(|b| b.len() == 24));
        for b in &p.batches {
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(l[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&n| n == 3));
        }
        // every class appears in the epoch
        let seen: std::collections::BTreeSet<usize> = p.batches.concat().iter().map(|&i| l[i]).collect();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn stratified_errors() {
        let l = labels(4, 3);
        assert!(matches!(stratified_batches(&l, 2, 1, 0), Err(Error::Config(_))));
        assert!(stratified_batches(&l, 5, 2, 0).is_err());
        assert!(stratified_batches(&l, 2, 4, 0).is_err());
    }

    #[test]
    fn stratified_is_seeded() {
        let l = labels(6, 4);
        assert_eq!(stratified_batches(&l, 3, 2, 9).unwrap(), stratified_batches(&l, 3, 2, 9).unwrap());
        assert_ne!(stratified_batches(&l, 3, 2, 9).unwrap(), stratified_batches(&l, 3, 2, 10).unwrap());
    }
}
