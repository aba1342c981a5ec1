//! Connected components of binary masks, point-mask construction and paired
//! prompt sampling.
//!
//! Components are maximal 4-connected sets of equal mask value. Two
//! components are neighbors when any of their pixels touch under
//! 8-connectivity, so diagonal contact counts as neighboring.

use crate::error::Result;
use crate::types::{BinaryMask, PointMask, PointPrompt, Seed};
use rand::Rng;

/// Partition of the pixel grid into connected components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentPartition {
    height: usize,
    width: usize,
    label_map: Vec<u32>,
    component_value: Vec<u8>,
    adjacency: Vec<Vec<u32>>,
}

impl ComponentPartition {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Component id per pixel, ids assigned in raster order of first pixel.
    pub fn label_map(&self) -> &[u32] {
        &self.label_map
    }

    pub fn count(&self) -> usize {
        self.component_value.len()
    }

    /// Original mask value of each component.
    pub fn component_value(&self) -> &[u8] {
        &self.component_value
    }

    /// Sorted ids of components 8-adjacent to `component`.
    pub fn neighbors(&self, component: usize) -> &[u32] {
        &self.adjacency[component]
    }

    pub fn component_at(&self, p: PointPrompt) -> usize {
        self.label_map[p.row * self.width + p.col] as usize
    }

    /// Point mask for `p`: 1 on its component, 0 on neighboring components, -1 elsewhere.
    pub fn point_mask(&self, p: PointPrompt) -> Result<PointMask> {
        p.check_bounds(self.height, self.width)?;
        let own = self.component_at(p);
        let mut code = vec![PointMask::IGNORE; self.count()];
        code[own] = 1;
        for &n in &self.adjacency[own] {
            code[n as usize] = 0;
        }
        let data = self.label_map.iter().map(|&c| code[c as usize]).collect();
        PointMask::new(self.height, self.width, data)
    }
}

pub fn connected_components(mask: &BinaryMask) -> ComponentPartition {
    let (h, w) = (mask.height(), mask.width());
    let values = mask.data();
    const UNSET: u32 = u32::MAX;
    let mut label_map = vec![UNSET; h * w];
    let mut component_value = Vec::new();
    let mut stack = Vec::new();

    for start in 0..h * w {
        if label_map[start] != UNSET {
            continue;
        }
        let id = component_value.len() as u32;
        let value = values[start];
        component_value.push(value);
        label_map[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if label_map[j] == UNSET && values[j] == value {
                    label_map[j] = id;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }

    let mut adjacency = vec![Vec::new(); component_value.len()];
    let mut link = |a: u32, b: u32| {
        if a != b {
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
    };
    for r in 0..h {
        for c in 0..w {
            let a = label_map[r * w + c];
            if c + 1 < w {
                link(a, label_map[r * w + c + 1]);
            }
            if r + 1 < h {
                link(a, label_map[(r + 1) * w + c]);
                if c > 0 {
                    link(a, label_map[(r + 1) * w + c - 1]);
                }
                if c + 1 < w {
                    link(a, label_map[(r + 1) * w + c + 1]);
                }
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }

    ComponentPartition {
        height: h,
        width: w,
        label_map,
        component_value,
        adjacency,
    }
}

pub fn point_mask(mask: &BinaryMask, p: PointPrompt) -> Result<PointMask> {
    p.check_bounds(mask.height(), mask.width())?;
    connected_components(mask).point_mask(p)
}

/// Draws `pairs` prompt pairs: the first point uniform over `Y = 0` pixels, the
/// second uniform over `Y = 1`. When the mask holds a single value both points
/// come from it.
pub fn sample_point_pairs(
    mask: &BinaryMask,
    pairs: usize,
    seed: Seed,
) -> Vec<(PointPrompt, PointPrompt)> {
    let w = mask.width();
    let (mut zeros, mut ones) = (Vec::new(), Vec::new());
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            zeros.push(i);
        } else {
            ones.push(i);
        }
    }
    let (first, second) = match (zeros.is_empty(), ones.is_empty()) {
        (false, false) => (&zeros, &ones),
        (true, _) => (&ones, &ones),
        (_, true) => (&zeros, &zeros),
    };
    let mut rng = seed.rng();
    let to_point = |i: usize| PointPrompt::new(i / w, i % w);
    (0..pairs)
        .map(|_| {
            let a = first[rng.random_range(0..first.len())];
            let b = second[rng.random_range(0..second.len())];
            (to_point(a), to_point(b))
        })
        .collect()
}
