//! Groups tasks by their skill subsets and renders the containment order
//! between those subsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::allocation::BinaryAllocation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyGroup {
    /// Active skills, ascending.
    pub subset: Vec<usize>,
    /// One character per skill, `1` when active.
    pub bits: String,
    pub tasks: Vec<String>,
}

impl HierarchyGroup {
    fn contains(&self, other: &HierarchyGroup) -> bool {
        other.subset.iter().all(|j| self.subset.binary_search(j).is_ok())
    }
}

/// Task groups ordered by subset (as a list of skill indices), then by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub num_skills: usize,
    pub groups: Vec<HierarchyGroup>,
}

pub fn export_hierarchy(z: &BinaryAllocation, task_names: &[String]) -> Result<Hierarchy> {
    if task_names.len() != z.num_tasks() {
        return Err(Error::shape(format!(
            "{} task names for {} allocation rows",
            task_names.len(),
            z.num_tasks()
        )));
    }
    let mut by_subset: BTreeMap<Vec<usize>, Vec<String>> = BTreeMap::new();
    for (i, name) in task_names.iter().enumerate() {
        let subset = (0..z.num_skills()).filter(|&j| z.get(i, j)).collect();
        by_subset.entry(subset).or_default().push(name.clone());
    }
    let groups = by_subset
        .into_iter()
        .map(|(subset, mut tasks)| {
            tasks.sort();
            let bits = (0..z.num_skills())
                .map(|j| if subset.contains(&j) { '1' } else { '0' })
                .collect();
            HierarchyGroup { subset, bits, tasks }
        })
        .collect();
    Ok(Hierarchy { num_skills: z.num_skills(), groups })
}

impl Hierarchy {
    /// `{bits: [task, ...]}` in group order.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for g in &self.groups {
            map.insert(g.bits.clone(), serde_json::json!(g.tasks));
        }
        serde_json::Value::Object(map)
    }

    /// Indices of the groups directly below group `g`: strict subsets with no
    /// other present subset in between.
    pub fn covers(&self, g: usize) -> Vec<usize> {
        let top = &self.groups[g];
        let below: Vec<usize> = (0..self.groups.len())
            .filter(|&h| h != g && top.contains(&self.groups[h]))
            .collect();
        below
            .iter()
            .copied()
            .filter(|&h| {
                !below
                    .iter()
                    .any(|&m| m != h && self.groups[m].contains(&self.groups[h]))
            })
            .collect()
    }

    /// Text rendering of the containment order, largest subsets first.
    pub fn render_text(&self) -> String {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.sort_by_key(|&g| std::cmp::Reverse(self.groups[g].subset.len()));
        let mut out = String::new();
        let mut level = usize::MAX;
        for g in order {
            let grp = &self.groups[g];
            if grp.subset.len() != level {
                level = grp.subset.len();
                let _ = writeln!(out, "[{level} skill(s)]");
            }
            let _ = writeln!(out, "  {}  {}", grp.bits, grp.tasks.join(", "));
            let covers = self.covers(g);
            if !covers.is_empty() {
                let names: Vec<&str> = covers.iter().map(|&h| self.groups[h].bits.as_str()).collect();
                let _ = writeln!(out, "      above {}", names.join(" "));
            }
        }
        out
    }
}
