// SPDX-License-Identifier: MIT OR Apache-2.0

//! Element-level masks over model parameters.

use crate::error::Result;

use super::{ComponentId, ModelConfig, ParamLayout};

/// One boolean mask per parameter tensor, aligned with the layout manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection {
    names: Vec<String>,
    masks: Vec<Vec<bool>>,
}

impl ParamSelection {
    pub fn empty(config: &ModelConfig) -> Self {
        let layout = ParamLayout::new(config);
        let masks = layout.shapes.iter().map(|s| vec![false; s.iter().product()]).collect();
        Self {
            names: layout.names,
            masks,
        }
    }

    pub fn full(config: &ModelConfig) -> Self {
        let mut sel = Self::empty(config);
        for m in &mut sel.masks {
            m.fill(true);
        }
        sel
    }

    /// Parameters a component writes through.
    ///
    /// A head owns its `d_head`-wide column slice of the query, key and
    /// value projections and the matching rows of the output projection;
    /// an MLP owns its four tensors; the embedding owns the token and
    /// position tables.
    pub fn for_components(config: &ModelConfig, components: &[ComponentId]) -> Result<Self> {
        let layout = ParamLayout::new(config);
        let mut sel = Self::empty(config);
        let (d, dh) = (config.d_model, config.d_head());
        for &c in components {
            config.check_component(c)?;
            match c {
                ComponentId::Embed => {
                    sel.masks[layout.wte].fill(true);
                    sel.masks[layout.wpe].fill(true);
                }
                ComponentId::Mlp { layer } => {
                    let lp = &layout.layers[layer];
                    for i in [lp.w_in, lp.b_in, lp.w_out, lp.b_out] {
                        sel.masks[i].fill(true);
                    }
                }
                ComponentId::AttnHead { layer, head } => {
                    let lp = &layout.layers[layer];
                    let cols = head * dh..(head + 1) * dh;
                    for i in [lp.w_q, lp.w_k, lp.w_v] {
                        for r in 0..d {
                            sel.masks[i][r * d + cols.start..r * d + cols.end].fill(true);
                        }
                    }
                    sel.masks[lp.w_o][cols.start * d..cols.end * d].fill(true);
                }
            }
        }
        Ok(sel)
    }

    /// Full query, key, value and output projections of the given layers.
    pub fn attention_layers(config: &ModelConfig, layers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let heads: Vec<ComponentId> = layers
            .into_iter()
            .flat_map(|layer| (0..config.n_heads).map(move |head| ComponentId::AttnHead { layer, head }))
            .collect();
        Self::for_components(config, &heads)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mask(&self, index: usize) -> &[bool] {
        &self.masks[index]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn count(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    /// Selected entries of the named tensor (0 for unknown names).
    pub fn count_in(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .map_or(0, |i| self.masks[i].iter().filter(|&&b| b).count())
    }

    pub fn is_empty(&self) -> bool {
        self.masks.iter().all(|m| m.iter().all(|&b| !b))
    }

    pub fn union(&self, other: &Self) -> Self {
        let masks = self
            .masks
            .iter()
            .zip(&other.masks)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x || y).collect())
            .collect();
        Self {
            names: self.names.clone(),
            masks,
        }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.masks
            .iter()
            .zip(&other.masks)
            .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !(x && y)))
    }
}
