//! Tail-class content transfer from translated source images into target images.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    class_mask, BinaryMask, ClassCatalog, DomainTag, Image, LabelMap, IGNORE_LABEL,
};
use crate::error::{Error, Result};
use crate::synthdata::count_instances;

/// A tail class that only counts when at least one companion class is present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceRule {
    pub carrier: usize,
    pub companions: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPolicy {
    tail_set: BTreeSet<usize>,
    rules: Vec<CooccurrenceRule>,
    min_tail_instances: usize,
}

impl TransferPolicy {
    pub fn new(
        tail_set: BTreeSet<usize>,
        rules: Vec<CooccurrenceRule>,
        min_tail_instances: usize,
    ) -> Result<Self> {
        if let Some(r) = rules.iter().find(|r| !tail_set.contains(&r.carrier)) {
            return Err(Error::Config(format!(
                "co-occurrence carrier {} is not a tail class",
                r.carrier
            )));
        }
        if let Some(r) = rules.iter().find(|r| r.companions.is_empty()) {
            return Err(Error::Config(format!(
                "co-occurrence rule for class {} has no companions",
                r.carrier
            )));
        }
        Ok(Self {
            tail_set,
            rules,
            min_tail_instances,
        })
    }

    /// Toy-catalog policy: poles need a sign, riders need a vehicle.
    pub fn toy(min_tail_instances: usize) -> Self {
        use crate::datamodel::ToyClass::*;
        let catalog = ClassCatalog::toy();
        let rule = |carrier: crate::datamodel::ToyClass, companion: crate::datamodel::ToyClass| {
            CooccurrenceRule {
                carrier: carrier as usize,
                companions: [companion as usize].into(),
            }
        };
        Self::new(
            catalog.tail_set().clone(),
            vec![rule(Pole, Sign), rule(Rider, Vehicle)],
            min_tail_instances,
        )
        .expect("toy policy is valid")
    }

    pub fn tail_set(&self) -> &BTreeSet<usize> {
        &self.tail_set
    }

    pub fn rules(&self) -> &[CooccurrenceRule] {
        &self.rules
    }

    pub fn min_tail_instances(&self) -> usize {
        self.min_tail_instances
    }

    pub fn with_min_tail_instances(mut self, n: usize) -> Self {
        self.min_tail_instances = n;
        self
    }
}

fn present_classes(y: &LabelMap) -> BTreeSet<usize> {
    y.indices()
        .iter()
        .filter(|&&l| l != IGNORE_LABEL)
        .map(|&l| l as usize)
        .collect()
}

/// Tail classes of `y_s` that may be transferred from this image: present,
/// and, for carriers, accompanied by at least one companion class.
pub fn apply_cooccurrence(y_s: &LabelMap, policy: &TransferPolicy) -> BTreeSet<usize> {
    let present = present_classes(y_s);
    policy
        .tail_set
        .iter()
        .copied()
        .filter(|k| present.contains(k))
        .filter(|k| {
            policy
                .rules
                .iter()
                .filter(|r| r.carrier == *k)
                .all(|r| !r.companions.is_disjoint(&present))
        })
        .collect()
}

/// Source labels restricted to the effective tail set.
pub fn tail_label(y_s: &LabelMap, policy: &TransferPolicy) -> LabelMap {
    let keep = apply_cooccurrence(y_s, policy);
    let labels = y_s
        .indices()
        .iter()
        .map(|&l| {
            if l != IGNORE_LABEL && keep.contains(&(l as usize)) {
                l
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    LabelMap::from_indices_unchecked(y_s.height(), y_s.width(), y_s.num_classes(), labels)
}

/// Number of 4-connected instances of the effective tail classes.
pub fn tail_instance_count(y_s: &LabelMap, policy: &TransferPolicy) -> usize {
    count_instances(y_s, &apply_cooccurrence(y_s, policy))
}

/// True iff the source image has strictly more tail instances than the policy minimum.
pub fn gate_transfer(y_s: &LabelMap, policy: &TransferPolicy) -> bool {
    tail_instance_count(y_s, policy) > policy.min_tail_instances
}

/// 1 where the pseudo label is a head class; unlabeled pixels are 0.
pub fn head_mask(y_t: &LabelMap, catalog: &ClassCatalog) -> BinaryMask {
    let head: BTreeSet<usize> = catalog
        .all_classes()
        .difference(catalog.tail_set())
        .copied()
        .collect();
    class_mask(y_t, &head)
}

/// Pixels that carry tail content in the source and head content in the target.
pub fn ct_mask(head_t: &BinaryMask, tail_s: &BinaryMask) -> Result<BinaryMask> {
    head_t.and(tail_s)
}

/// Full mask pipeline for one source/target pair.
pub fn transfer_mask(
    y_s: &LabelMap,
    y_t: &LabelMap,
    catalog: &ClassCatalog,
    policy: &TransferPolicy,
) -> Result<BinaryMask> {
    let tail_s = class_mask(&tail_label(y_s, policy), policy.tail_set());
    ct_mask(&head_mask(y_t, catalog), &tail_s)
}

fn check_mask_size(h: usize, w: usize, m: &BinaryMask) -> Result<()> {
    if (m.height(), m.width()) != (h, w) {
        return Err(Error::contract(format!(
            "mask {}x{} does not match {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Pastes translated-source pixels into the target image under the mask.
pub fn input_transfer(i_s2t: &Image, i_t: &Image, m: &BinaryMask) -> Result<Image> {
    let (h, w) = (i_t.height(), i_t.width());
    if (i_s2t.height(), i_s2t.width()) != (h, w) {
        return Err(Error::contract(format!(
            "donor {}x{} does not match target {h}x{w}",
            i_s2t.height(),
            i_s2t.width()
        )));
    }
    check_mask_size(h, w, m)?;
    let plane = h * w;
    let data = i_t
        .data()
        .iter()
        .zip(i_s2t.data())
        .enumerate()
        .map(|(i, (&t, &s))| if m.get(i % plane) { s } else { t })
        .collect();
    Image::new(h, w, data, DomainTag::Target)
}

/// Replaces pseudo labels with source ground truth under the mask.
pub fn output_transfer(y_s: &LabelMap, y_t_ct: &LabelMap, m: &BinaryMask) -> Result<LabelMap> {
    let dims = (y_t_ct.height(), y_t_ct.width(), y_t_ct.num_classes());
    if (y_s.height(), y_s.width(), y_s.num_classes()) != dims {
        return Err(Error::contract("source and pseudo labels differ in shape"));
    }
    check_mask_size(dims.0, dims.1, m)?;
    let labels = y_s
        .indices()
        .iter()
        .zip(y_t_ct.indices())
        .enumerate()
        .map(|(i, (&s, &t))| if m.get(i) { s } else { t })
        .collect();
    Ok(LabelMap::from_indices_unchecked(
        dims.0, dims.1, dims.2, labels,
    ))
}
