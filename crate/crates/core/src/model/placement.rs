use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ComponentRef, Placement, WorkflowGraph};

/// Maps every instance to the node that executes it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub assignments: BTreeMap<String, String>,
}

impl PlacementPlan {
    pub fn node_of(&self, instance: &str) -> Option<&str> {
        self.assignments.get(instance).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("override places `{instance}` on `{node}`, which does not publish {component}")]
    OverrideInvalid { instance: String, node: String, component: ComponentRef },
    #[error("no node provides {component} for `{instance}`")]
    NoProvider { instance: String, component: ComponentRef },
    #[error("override names unknown instance `{0}`")]
    UnknownInstance(String),
}

impl PlacementError {
    pub fn code(&self) -> &'static str {
        match self {
            PlacementError::OverrideInvalid { .. } => "OVERRIDE_INVALID",
            PlacementError::NoProvider { .. } => "NO_PROVIDER",
            PlacementError::UnknownInstance(_) => "UNKNOWN_INSTANCE",
        }
    }
}

/// Chooses a node for every instance.
///
/// Precedence: explicit `overrides`, then the instance's own placement, then
/// the single provider, then the lexicographically smallest provider.
pub fn plan_placement(
    graph: &WorkflowGraph,
    providers: &BTreeMap<ComponentRef, BTreeSet<String>>,
    overrides: &BTreeMap<String, String>,
) -> Result<PlacementPlan, PlacementError> {
    if let Some(unknown) = overrides.keys().find(|id| graph.instance(id).is_none()) {
        return Err(PlacementError::UnknownInstance(unknown.clone()));
    }
    let empty = BTreeSet::new();
    let mut assignments = BTreeMap::new();
    for inst in &graph.components {
        let nodes = providers.get(&inst.component).unwrap_or(&empty);
        let requested = overrides.get(&inst.id).cloned().or(match &inst.placement {
            Placement::Node(n) => Some(n.clone()),
            Placement::Auto => None,
        });
        let node = match requested {
            Some(node) => {
                if !nodes.contains(&node) {
                    return Err(PlacementError::OverrideInvalid {
                        instance: inst.id.clone(),
                        node,
                        component: inst.component.clone(),
                    });
                }
                node
            }
            None => nodes.iter().next().cloned().ok_or_else(|| PlacementError::NoProvider {
                instance: inst.id.clone(),
                component: inst.component.clone(),
            })?,
        };
        assignments.insert(inst.id.clone(), node);
    }
    Ok(PlacementPlan { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_workflow;

    fn graph() -> WorkflowGraph {
        parse_workflow(
            r#"{"name":"p","components":[{"id":"sim1","component":"sim@1"},{"id":"eval","component":"eval@1"}]}"#,
        )
        .unwrap()
    }

    fn providers(sim: &[&str], eval: &[&str]) -> BTreeMap<ComponentRef, BTreeSet<String>> {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        BTreeMap::from([(ComponentRef::new("sim", "1"), set(sim)), (ComponentRef::new("eval", "1"), set(eval))])
    }

    #[test]
    fn single_provider() {
        let plan = plan_placement(&graph(), &providers(&["nodeA"], &["nodeA"]), &BTreeMap::new()).unwrap();
        assert!(plan.assignments.values().all(|n| n == "nodeA"));
    }

    #[test]
    fn lexicographic_tie_break() {
        let plan = plan_placement(&graph(), &providers(&["nodeB", "nodeA"], &["nodeB"]), &BTreeMap::new()).unwrap();
        assert_eq!(plan.node_of("sim1"), Some("nodeA"));
        assert_eq!(plan.node_of("eval"), Some("nodeB"));
    }

    #[test]
    fn override_respected_and_checked() {
        let reg = providers(&["nodeA", "nodeB"], &["nodeA"]);
        let ov = BTreeMap::from([("sim1".to_string(), "nodeB".to_string())]);
        assert_eq!(plan_placement(&graph(), &reg, &ov).unwrap().node_of("sim1"), Some("nodeB"));

        let bad = BTreeMap::from([("eval".to_string(), "nodeB".to_string())]);
        assert_eq!(plan_placement(&graph(), &reg, &bad).unwrap_err().code(), "OVERRIDE_INVALID");
    }

    #[test]
    fn missing_provider() {
        let err = plan_placement(&graph(), &providers(&["nodeA"], &[]), &BTreeMap::new()).unwrap_err();
        assert_eq!(err.code(), "NO_PROVIDER");
    }

    #[test]
    fn deterministic() {
        let reg = providers(&["n3", "n1", "n2"], &["n2", "n9"]);
        let a = plan_placement(&graph(), &reg, &BTreeMap::new()).unwrap();
        let b = plan_placement(&graph(), &reg, &BTreeMap::new()).unwrap();
        assert_eq!(a, b);
    }
}
