//! Assembles per-pair clusterings into video-long tracked instances.
//!
//! Cluster ids are consistent inside one overlapping frame pair; identity
//! across pairs is established by greedy highest-IoU matching on the shared
//! frame. Splits leave the matching as newborn instances; parent links are
//! assigned afterwards by highest IoU against the previous frame, and the
//! family tree is postprocessed so no instance id continues after it has
//! split into children.

use std::collections::BTreeMap;

use crate::loss::InstanceLabelMap;
use crate::tensor::Real;

/// One tracked instance: a contiguous frame range with one mask per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedInstance {
    pub id: u32,
    pub first_frame: usize,
    pub last_frame: usize,
    pub parent: Option<u32>,
    /// Sorted pixel indices per frame, for every frame of the range.
    pub masks: BTreeMap<usize, Vec<u32>>,
}

/// All tracked instances of one video plus the label-map extent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LineageForest {
    pub instances: BTreeMap<u32, TrackedInstance>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl LineageForest {
    /// Dense label map of one frame (0 = background).
    pub fn label_map(&self, frame: usize) -> Vec<u32> {
        let mut map = vec![0u32; self.height * self.width];
        for inst in self.instances.values() {
            if let Some(mask) = inst.masks.get(&frame) {
                for &p in mask {
                    debug_assert_eq!(map[p as usize], 0, "overlapping instance masks");
                    map[p as usize] = inst.id;
                }
            }
        }
        map
    }

    pub fn label_maps(&self) -> Vec<InstanceLabelMap> {
        (0..self.frames)
            .map(|f| InstanceLabelMap::new(self.height, self.width, self.label_map(f)))
            .collect()
    }

    /// Panics if the forest violates its invariants: unique ids, acyclic
    /// parent links, per-frame disjointness and full frame coverage.
    pub fn validate(&self) {
        for (id, inst) in &self.instances {
            assert_eq!(*id, inst.id);
            assert!(inst.first_frame <= inst.last_frame);
            for f in inst.first_frame..=inst.last_frame {
                assert!(
                    inst.masks.get(&f).is_some_and(|m| !m.is_empty()),
                    "instance {id} has no mask in frame {f} of its range"
                );
            }
            assert_eq!(inst.masks.len(), inst.last_frame - inst.first_frame + 1);
            if let Some(parent) = inst.parent {
                let p = self.instances.get(&parent).expect("parent exists");
                assert!(
                    p.first_frame < inst.first_frame,
                    "parent {parent} does not precede child {id}"
                );
            }
        }
        // Acyclicity: walk parent chains.
        for &id in self.instances.keys() {
            let mut seen = vec![id];
            let mut cur = id;
            while let Some(parent) = self.instances[&cur].parent {
                assert!(!seen.contains(&parent), "cycle in parent links at instance {parent}");
                seen.push(parent);
                cur = parent;
            }
        }
        // Disjointness via label_map's debug assert.
        for f in 0..self.frames {
            let _ = self.label_map(f);
        }
    }

    /// Plain-text lineage table: `ID first_frame last_frame parent_ID`,
    /// 0 meaning no parent.
    pub fn lineage_table(&self) -> String {
        let mut out = String::new();
        for inst in self.instances.values() {
            out.push_str(&format!(
                "{} {} {} {}\n",
                inst.id,
                inst.first_frame,
                inst.last_frame,
                inst.parent.unwrap_or(0)
            ));
        }
        out
    }
}

/// Intersection over union of two sorted pixel masks; 0 when both empty.
pub fn iou(a: &[u32], b: &[u32]) -> Real {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as Real / union as Real
}

fn masks_of(map: &InstanceLabelMap) -> BTreeMap<u32, Vec<u32>> {
    let mut masks: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (p, (&l, &v)) in map.labels.iter().zip(&map.valid).enumerate() {
        if v && l != 0 {
            masks.entry(l).or_default().push(p as u32);
        }
    }
    masks
}

/// Greedy highest-IoU matching between the instances of `prev` (global
/// ids) and `next` (pair-local ids) on a shared frame. Each side is
/// matched at most once; only positive IoU matches. Ties break to the
/// lower global id, then the lower local id. Returns `local -> global`.
pub fn match_pair_overlap(prev: &InstanceLabelMap, next: &InstanceLabelMap) -> BTreeMap<u32, u32> {
    let prev_masks = masks_of(prev);
    let next_masks = masks_of(next);
    let mut candidates: Vec<(Real, u32, u32)> = Vec::new();
    for (&g, gm) in &prev_masks {
        for (&l, lm) in &next_masks {
            let v = iou(gm, lm);
            if v > 0.0 {
                candidates.push((v, g, l));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken_g = std::collections::BTreeSet::new();
    let mut taken_l = std::collections::BTreeSet::new();
    let mut mapping = BTreeMap::new();
    for (_, g, l) in candidates {
        if taken_g.contains(&g) || taken_l.contains(&l) {
            continue;
        }
        taken_g.insert(g);
        taken_l.insert(l);
        mapping.insert(l, g);
    }
    mapping
}

fn instances_from_frame_maps(frame_maps: &[Vec<u32>], height: usize, width: usize) -> LineageForest {
    let mut instances: BTreeMap<u32, TrackedInstance> = BTreeMap::new();
    for (f, map) in frame_maps.iter().enumerate() {
        let mut per_id: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (p, &l) in map.iter().enumerate() {
            if l != 0 {
                per_id.entry(l).or_default().push(p as u32);
            }
        }
        for (id, mask) in per_id {
            let inst = instances.entry(id).or_insert_with(|| TrackedInstance {
                id,
                first_frame: f,
                last_frame: f,
                parent: None,
                masks: BTreeMap::new(),
            });
            assert!(
                inst.masks.is_empty() || inst.last_frame + 1 == f || inst.last_frame == f,
                "instance {id} has a frame gap (last {} next {f})",
                inst.last_frame
            );
            inst.last_frame = f;
            inst.masks.insert(f, mask);
        }
    }
    LineageForest {
        instances,
        frames: frame_maps.len(),
        height,
        width,
    }
}

/// Merges the clusterings of overlapping frame pairs into one forest with
/// globally unique ids. `pairs[p]` holds the two label maps of frames
/// `(p, p+1)` sharing pair-local cluster ids. The final mask of a frame
/// comes from the first pair containing it.
pub fn merge_pair_labelings(pairs: &[[InstanceLabelMap; 2]]) -> LineageForest {
    assert!(!pairs.is_empty(), "merge_pair_labelings: no pairs");
    let (h, w) = (pairs[0][0].height, pairs[0][0].width);
    let frames = pairs.len() + 1;
    let mut frame_maps: Vec<Vec<u32>> = Vec::with_capacity(frames);
    let mut next_global = 1u32;

    // Pair 0 founds the global ids.
    let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
    for id in masks_of(&pairs[0][0]).keys().chain(masks_of(&pairs[0][1]).keys()) {
        mapping.entry(*id).or_insert_with(|| {
            let g = next_global;
            next_global += 1;
            g
        });
    }
    let translate = |map: &InstanceLabelMap, mapping: &BTreeMap<u32, u32>| -> Vec<u32> {
        map.labels
            .iter()
            .map(|&l| if l == 0 { 0 } else { *mapping.get(&l).expect("mapped id") })
            .collect()
    };
    frame_maps.push(translate(&pairs[0][0], &mapping));
    frame_maps.push(translate(&pairs[0][1], &mapping));

    for (p, pair) in pairs.iter().enumerate().skip(1) {
        let shared = InstanceLabelMap::new(h, w, frame_maps[p].clone());
        let mut mapping = match_pair_overlap(&shared, &pair[0]);
        // Unmatched pair-local clusters become newborn global instances,
        // in ascending local-id order.
        let mut locals: Vec<u32> = masks_of(&pair[0]).keys().copied().collect();
        locals.extend(masks_of(&pair[1]).keys().copied());
        locals.sort_unstable();
        locals.dedup();
        for l in locals {
            mapping.entry(l).or_insert_with(|| {
                let g = next_global;
                next_global += 1;
                g
            });
        }
        frame_maps.push(translate(&pair[1], &mapping));
    }
    instances_from_frame_maps(&frame_maps, h, w)
}

/// Assigns a parent to every instance born after frame 0: the instance
/// with the highest positive IoU between its mask in an earlier frame and
/// the newborn's first mask. Frames are searched from the birth frame's
/// predecessor backwards through `lookback` frames; ties break to the
/// lower id.
pub fn assign_parents(forest: &mut LineageForest, lookback: usize) {
    let ids: Vec<u32> = forest.instances.keys().copied().collect();
    for id in ids {
        let (birth, first_mask) = {
            let inst = &forest.instances[&id];
            if inst.first_frame == 0 || inst.parent.is_some() {
                continue;
            }
            (inst.first_frame, inst.masks[&inst.first_frame].clone())
        };
        let mut parent: Option<(Real, u32)> = None;
        for back in 1..=lookback {
            if back > birth {
                break;
            }
            let f = birth - back;
            for (&cand_id, cand) in &forest.instances {
                if cand_id == id {
                    continue;
                }
                if let Some(mask) = cand.masks.get(&f) {
                    let v = iou(mask, &first_mask);
                    if v > 0.0 && parent.is_none_or(|(best, best_id)| {
                        v > best || (v == best && cand_id < best_id)
                    }) {
                        parent = Some((v, cand_id));
                    }
                }
            }
            if parent.is_some() {
                break;
            }
        }
        forest.instances.get_mut(&id).unwrap().parent = parent.map(|(_, p)| p);
    }
}

/// Enforces the family-tree rule that an instance id may not continue
/// after splitting into children: a parent whose masks persist past a
/// child's birth frame is truncated and its continuation re-labelled as an
/// additional child. Later-born children are re-pointed to the fragment
/// covering their birth.
pub fn postprocess_lineage(forest: &mut LineageForest) {
    let mut next_id = forest.instances.keys().copied().max().unwrap_or(0) + 1;
    loop {
        // Earliest violation: parent id whose range reaches a child's birth.
        let mut violation: Option<(u32, usize)> = None;
        for inst in forest.instances.values() {
            if let Some(parent) = inst.parent {
                let p = &forest.instances[&parent];
                if p.last_frame >= inst.first_frame {
                    let k = inst.first_frame;
                    if violation.is_none_or(|(_, vk)| k < vk) {
                        violation = Some((parent, k));
                    }
                }
            }
        }
        let Some((parent_id, k)) = violation else { break };

        let fragment_id = next_id;
        next_id += 1;
        let (frag_first, frag_last, frag_masks) = {
            let p = forest.instances.get_mut(&parent_id).unwrap();
            let frag_masks: BTreeMap<usize, Vec<u32>> = p.masks.split_off(&k);
            let frag_last = p.last_frame;
            p.last_frame = k - 1;
            (k, frag_last, frag_masks)
        };
        forest.instances.insert(
            fragment_id,
            TrackedInstance {
                id: fragment_id,
                first_frame: frag_first,
                last_frame: frag_last,
                parent: Some(parent_id),
                masks: frag_masks,
            },
        );
        // Children of the old id born after the split now descend from the
        // fragment.
        let reassign: Vec<u32> = forest
            .instances
            .values()
            .filter(|c| c.parent == Some(parent_id) && c.first_frame > k && c.id != fragment_id)
            .map(|c| c.id)
            .collect();
        for id in reassign {
            forest.instances.get_mut(&id).unwrap().parent = Some(fragment_id);
        }
    }
    forest.validate();
}

/// Nearest-neighbor upsampling of every mask to the original image extent.
pub fn upsample_to_original(forest: &LineageForest, height: usize, width: usize) -> LineageForest {
    if (height, width) == (forest.height, forest.width) {
        return forest.clone();
    }
    let frame_maps: Vec<Vec<u32>> = (0..forest.frames)
        .map(|f| {
            crate::data::resize_labels_nearest(
                &forest.label_map(f),
                forest.height,
                forest.width,
                height,
                width,
            )
        })
        .collect();
    let mut out = instances_from_frame_maps(&frame_maps, height, width);
    for (id, inst) in &mut out.instances {
        let src = &forest.instances[id];
        assert_eq!(
            (inst.first_frame, inst.last_frame),
            (src.first_frame, src.last_frame),
            "instance {id} changed its frame range during upsampling"
        );
        inst.parent = src.parent;
    }
    out
}

/// Tracks a sequence of independently labelled frames (ids not consistent
/// across frames): greedy IoU matching frame to frame, then parent
/// assignment and family-tree postprocessing.
pub fn track_label_sequence(maps: &[InstanceLabelMap], lookback: usize) -> LineageForest {
    assert!(!maps.is_empty(), "track_label_sequence: no frames");
    let (h, w) = (maps[0].height, maps[0].width);
    let mut frame_maps: Vec<Vec<u32>> = Vec::with_capacity(maps.len());
    let mut next_global = 1u32;
    let mut first_mapping: BTreeMap<u32, u32> = BTreeMap::new();
    for id in masks_of(&maps[0]).keys() {
        first_mapping.insert(*id, next_global);
        next_global += 1;
    }
    frame_maps.push(
        maps[0]
            .labels
            .iter()
            .map(|&l| if l == 0 { 0 } else { first_mapping[&l] })
            .collect(),
    );
    for f in 1..maps.len() {
        let prev = InstanceLabelMap::new(h, w, frame_maps[f - 1].clone());
        let mut mapping = match_pair_overlap(&prev, &maps[f]);
        let mut locals: Vec<u32> = masks_of(&maps[f]).keys().copied().collect();
        locals.sort_unstable();
        for l in locals {
            mapping.entry(l).or_insert_with(|| {
                let g = next_global;
                next_global += 1;
                g
            });
        }
        frame_maps.push(
            maps[f]
                .labels
                .iter()
                .map(|&l| if l == 0 { 0 } else { mapping[&l] })
                .collect(),
        );
    }
    let mut forest = instances_from_frame_maps(&frame_maps, h, w);
    assign_parents(&mut forest, lookback);
    postprocess_lineage(&mut forest);
    forest
}
