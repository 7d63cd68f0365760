//! Test fixtures shared by the workspace: small POSIX `sh`/`awk` tools that
//! follow the working-directory contract, their descriptors, and workflow
//! documents built from them.
//!
//! Everything is produced as text so this crate does not depend on the crates
//! it helps test.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

/// Reads a scalar (or a relative path) for key `$1` from `inputs.json`.
const VAL: &str = r#"val() { awk -v k="\"$1\"" 'index($0, k ":") { sub(/^[^:]*: */, ""); sub(/,$/, ""); gsub(/"/, ""); print }' inputs.json; }"#;

const SCRIPTS: &[(&str, &str)] = &[
    (
        "simulation.sh",
        r#"s=$(val scenario)
awk -v s="$s" 'BEGIN { for (t = 0; t <= 10; t++) printf "%d,%.6f,%.6f\n", t, s * t * 100, 250 - s * t }' > outputs/trajectory.csv
printf '{"trajectory": "outputs/trajectory.csv"}\n' > outputs.json
echo "simulated scenario $s"
"#,
    ),
    (
        "performance.sh",
        r#"f=$(val trajectory)
p=$(awk -F, '{ d += $2 } END { printf "%.17g", d / NR }' "$f")
printf '{"performance": %s}\n' "$p" > outputs.json
"#,
    ),
    (
        "economics.sh",
        r#"f=$(val trajectory)
c=$(awk -F, '{ c += $3 } END { printf "%.17g", c * 1.5 }' "$f")
printf '{"cost": %s}\n' "$c" > outputs.json
"#,
    ),
    (
        "ecology.sh",
        r#"f=$(val trajectory)
e=$(awk -F, '$2 > m { m = $2 } END { printf "%.17g", m * 0.01 }' "$f")
printf '{"emissions": %s}\n' "$e" > outputs.json
"#,
    ),
    (
        "summary.sh",
        r#"p=$(val performance); c=$(val cost); e=$(val emissions)
printf 'performance %s\ncost %s\nemissions %s\n' "$p" "$c" "$e" > outputs/report.txt
score=$(awk -v p="$p" -v c="$c" -v e="$e" 'BEGIN { printf "%.17g", p / (c + e) }')
printf '{"report": "outputs/report.txt", "score": %s}\n' "$score" > outputs.json
"#,
    ),
    ("identity.sh", "sed 's/\"x\"/\"y\"/' inputs.json > outputs.json\n"),
    (
        "double-input.sh",
        r#"x=$(val x)
awk -v x="$x" 'BEGIN { printf "{\n  \"x\": %.17g\n}\n", x * 2 }' > inputs.json
"#,
    ),
    (
        "square.sh",
        r#"x=$(val x)
awk -v x="$x" 'BEGIN { printf "{\"y\": %.17g}\n", x * x }' > outputs.json
"#,
    ),
    ("fail.sh", "echo 'failing on purpose' >&2\nexit 3\n"),
    ("objective.sh", "awk -v x=\"$1\" 'BEGIN { printf \"{\\\"f\\\": %.17g}\\n\", (x - 3) * (x - 3) }' > outputs.json\n"),
    ("babylon.sh", "awk -v x=\"$1\" 'BEGIN { printf \"{\\\"y\\\": %.17g}\\n\", (x + 2 / x) / 2 }' > outputs.json\n"),
    ("increment.sh", "awk -v x=\"$1\" 'BEGIN { printf \"{\\\"y\\\": %d}\\n\", x + 1 }' > outputs.json\n"),
    ("copy-file.sh", "cp \"$1\" outputs/copy\nprintf '{\"g\": \"outputs/copy\"}\\n' > outputs.json\n"),
    ("sleep.sh", "sleep \"$1\"\nprintf '{\"y\": %s}\\n' \"$1\" > outputs.json\n"),
];

/// Instance ids of the airplane evaluation workflow, in declaration order.
pub const FIG1A_INSTANCES: [&str; 5] = ["simulation", "performance", "economics", "ecology", "summary"];

/// A directory holding the fixture scripts.
#[derive(Debug, Clone)]
pub struct Fixtures {
    dir: PathBuf,
}

impl Fixtures {
    /// Writes every fixture script into `dir`.
    pub fn install(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        for (name, body) in SCRIPTS {
            fs::write(dir.join(name), format!("#!/bin/sh\nset -e\n{VAL}\n{body}"))?;
        }
        let dir = dir.canonicalize()?;
        Ok(Fixtures { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn script(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn sh(&self, script: &str, args: &str) -> String {
        let cmd = format!("sh {}", self.script(script).display());
        if args.is_empty() {
            cmd
        } else {
            format!("{cmd} {args}")
        }
    }

    fn descriptor(&self, name: &str, command: String, inputs: Value, outputs: Value) -> String {
        let doc = json!({
            "name": name,
            "version": "1.0",
            "commands": {"linux": command},
            "inputs": inputs,
            "outputs": outputs,
            "documentation": format!("{name} test fixture"),
        });
        serde_json::to_string_pretty(&doc).expect("json")
    }

    /// Descriptors of the five airplane evaluation tools.
    pub fn fig1a_descriptors(&self) -> Vec<String> {
        let file = |n: &str| json!([{"name": n, "type": "FileRef"}]);
        let float = |n: &str| json!([{"name": n, "type": "Float"}]);
        vec![
            self.descriptor("scenario-simulation", self.sh("simulation.sh", ""), float("scenario"), file("trajectory")),
            self.descriptor("performance-evaluation", self.sh("performance.sh", ""), file("trajectory"), float("performance")),
            self.descriptor("economic-evaluation", self.sh("economics.sh", ""), file("trajectory"), float("cost")),
            self.descriptor("ecological-evaluation", self.sh("ecology.sh", ""), file("trajectory"), float("emissions")),
            self.descriptor(
                "summary",
                self.sh("summary.sh", ""),
                json!([{"name": "performance", "type": "Float"}, {"name": "cost", "type": "Float"}, {"name": "emissions", "type": "Float"}]),
                json!([{"name": "report", "type": "FileRef"}, {"name": "score", "type": "Float"}]),
            ),
        ]
    }

    /// `identity@1.0`: copies Integer `x` to `y`.
    pub fn identity_descriptor(&self) -> String {
        self.descriptor(
            "identity",
            self.sh("identity.sh", ""),
            json!([{"name": "x", "type": "Integer"}]),
            json!([{"name": "y", "type": "Integer"}]),
        )
    }

    /// `square@1.0`: the pre stage doubles `x` in `inputs.json`, main squares it.
    pub fn square_descriptor(&self) -> String {
        let mut doc: Value = serde_json::from_str(&self.descriptor(
            "square",
            self.sh("square.sh", ""),
            json!([{"name": "x", "type": "Float"}]),
            json!([{"name": "y", "type": "Float"}]),
        ))
        .expect("json");
        doc["preScript"] = json!(self.sh("double-input.sh", ""));
        serde_json::to_string_pretty(&doc).expect("json")
    }

    /// `failing@1.0`: main stage exits with status 3.
    pub fn failing_descriptor(&self) -> String {
        self.descriptor(
            "failing",
            self.sh("fail.sh", ""),
            json!([{"name": "x", "type": "Integer"}]),
            json!([{"name": "y", "type": "Integer"}]),
        )
    }

    /// `sleeper@1.0`: sleeps `x` seconds, then returns it.
    pub fn sleeper_descriptor(&self) -> String {
        self.descriptor(
            "sleeper",
            self.sh("sleep.sh", "${in:x}"),
            json!([{"name": "x", "type": "Float"}]),
            json!([{"name": "y", "type": "Float"}]),
        )
    }

    /// Command template of the `(x-3)^2` objective script.
    pub fn objective_command(&self) -> String {
        self.sh("objective.sh", "${in:x}")
    }

    pub fn babylon_command(&self) -> String {
        self.sh("babylon.sh", "${in:x}")
    }

    pub fn increment_command(&self) -> String {
        self.sh("increment.sh", "${in:x}")
    }

    pub fn copy_file_command(&self) -> String {
        self.sh("copy-file.sh", "${in:f}")
    }

    pub fn fail_command(&self) -> String {
        self.sh("fail.sh", "")
    }

    /// Optimizer loop minimizing `(x-3)^2` on `[0, 10]` with step 1.
    pub fn fig1b_workflow(&self, strategy: &str, tol: f64, max_evals: u32) -> String {
        let doc = json!({
            "name": format!("optimal-airplane-{strategy}"),
            "components": [
                {"id": "optimizer", "component": "std.optimizer@1", "config": {
                    "strategy": strategy,
                    "variables": [{"name": "x", "lower": 0.0, "upper": 10.0, "initial_step": 1.0}],
                    "tol": tol,
                    "max_evals": max_evals}},
                {"id": "objective", "component": "std.script@1", "config": {"command": self.objective_command()},
                 "inputs": [{"name": "x", "type": "Float"}], "outputs": [{"name": "f", "type": "Float"}]}
            ],
            "connections": [
                {"from": "optimizer.x", "to": "objective.x"},
                {"from": "objective.f", "to": "optimizer.objective"}
            ],
            "labels": [{"text": "optimization loop", "members": ["optimizer", "objective"]}]
        });
        serde_json::to_string_pretty(&doc).expect("json")
    }

    /// Converger loop running the Babylonian iteration for sqrt(2) from x = 1.
    pub fn converger_workflow(&self, eps_abs: f64, max_iterations: u32) -> String {
        let doc = json!({
            "name": "sqrt2",
            "components": [
                {"id": "converger", "component": "std.converger@1",
                 "config": {"eps_abs": eps_abs, "max_iterations": max_iterations, "seeds": {"x": 1.0}}},
                {"id": "step", "component": "std.script@1", "config": {"command": self.babylon_command()},
                 "inputs": [{"name": "x", "type": "Float"}], "outputs": [{"name": "y", "type": "Float"}]}
            ],
            "connections": [
                {"from": "converger.loop", "to": "step.x"},
                {"from": "step.y", "to": "converger.x"}
            ]
        });
        serde_json::to_string_pretty(&doc).expect("json")
    }

    /// A two-input script fed on `a` only; its `b` input hangs off a switch branch that never fires.
    pub fn stall_workflow(&self) -> String {
        let doc = json!({
            "name": "starved",
            "components": [
                {"id": "source", "component": "std.input-provider@1", "config": {"values": {"v": 1.0}}},
                {"id": "gate", "component": "std.switch@1", "config": {"condition": "< 10"}},
                {"id": "join", "component": "std.script@1", "config": {"command": self.fail_command()},
                 "inputs": [{"name": "a", "type": "Float"}, {"name": "b", "type": "Float"}],
                 "outputs": [{"name": "y", "type": "Float"}]}
            ],
            "connections": [
                {"from": "source.v", "to": "join.a"},
                {"from": "source.v", "to": "gate.value"},
                {"from": "gate.false", "to": "join.b"}
            ]
        });
        serde_json::to_string_pretty(&doc).expect("json")
    }
}

/// The airplane evaluation workflow: simulation feeding three evaluations
/// that all feed the summary. `placement` optionally pins instances to nodes.
pub fn fig1a_workflow(placement: &BTreeMap<&str, &str>) -> String {
    let tools = [
        ("simulation", "scenario-simulation@1.0"),
        ("performance", "performance-evaluation@1.0"),
        ("economics", "economic-evaluation@1.0"),
        ("ecology", "ecological-evaluation@1.0"),
        ("summary", "summary@1.0"),
    ];
    let components: Vec<Value> = tools
        .iter()
        .map(|(id, component)| {
            let mut c = json!({"id": id, "component": component});
            if *id == "simulation" {
                c["config"] = json!({"seeds": {"scenario": 0.78}});
            }
            if let Some(node) = placement.get(id) {
                c["placement"] = json!(node);
            }
            c
        })
        .collect();
    let doc = json!({
        "name": "airplane-evaluation",
        "components": components,
        "connections": [
            {"from": "simulation.trajectory", "to": "performance.trajectory"},
            {"from": "simulation.trajectory", "to": "economics.trajectory"},
            {"from": "simulation.trajectory", "to": "ecology.trajectory"},
            {"from": "performance.performance", "to": "summary.performance"},
            {"from": "economics.cost", "to": "summary.cost"},
            {"from": "ecology.emissions", "to": "summary.emissions"}
        ],
        "labels": [
            {"text": "evaluations", "members": ["performance", "economics", "ecology"], "color": "blue"},
            {"text": "simulation", "members": ["simulation"], "color": "green"}
        ]
    });
    serde_json::to_string_pretty(&doc).expect("json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_are_written() {
        let dir = std::env::temp_dir().join(format!("toolweave-fixtures-{}", std::process::id()));
        let f = Fixtures::install(&dir).unwrap();
        for (name, _) in SCRIPTS {
            assert!(f.script(name).is_file());
        }
        assert_eq!(f.fig1a_descriptors().len(), 5);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fig1a_shape() {
        let doc: Value = serde_json::from_str(&fig1a_workflow(&BTreeMap::new())).unwrap();
        assert_eq!(doc["components"].as_array().unwrap().len(), 5);
        assert_eq!(doc["connections"].as_array().unwrap().len(), 6);
    }
}
