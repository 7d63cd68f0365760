//! `tool integrate | list | publish | unpublish`.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use serde_json::json;
use toolweave_core::model::{ComponentRef, EndpointDecl, Handling};
use toolweave_core::tool::{parse_descriptor, scaffold_descriptor, ScaffoldAnswers};

use crate::config::{connect_peers, ephemeral_id, io_error, ConfigDir, Publication, PUBLIC_GROUP};
use crate::{print_json, CliError, CliResult, EXIT_OK};

/// `name:Type` or `name:Type:constant`.
pub fn parse_endpoint(arg: &str) -> Result<EndpointDecl, String> {
    let mut parts = arg.split(':');
    let (Some(name), Some(ty)) = (parts.next(), parts.next()) else {
        return Err(format!("expected <name>:<Type>[:constant|queued], got `{arg}`"));
    };
    let handling = match parts.next() {
        None => None,
        Some("constant") => Some(Handling::Constant),
        Some("queued") => Some(Handling::Queued),
        Some(other) => return Err(format!("unknown handling `{other}`")),
    };
    if parts.next().is_some() {
        return Err(format!("too many fields in `{arg}`"));
    }
    Ok(EndpointDecl { name: name.to_owned(), datum_type: ty.parse()?, handling })
}

#[derive(Debug, Clone, Default)]
pub struct IntegrateOptions {
    pub answers: ScaffoldAnswers,
    /// Existing descriptor file to install instead of answers.
    pub from: Option<PathBuf>,
    pub force: bool,
}

fn prompt(out: &mut impl Write, input: &mut impl BufRead, question: &str) -> CliResult<String> {
    write!(out, "{question}: ").and_then(|_| out.flush()).map_err(|e| CliError::environment(e.to_string()))?;
    let mut line = String::new();
    input.read_line(&mut line).map_err(|e| CliError::environment(e.to_string()))?;
    Ok(line.trim().to_owned())
}

fn endpoint_list(text: &str) -> CliResult<Vec<EndpointDecl>> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_endpoint(s).map_err(CliError::usage)).collect()
}

/// Collects answers line by line from `input`.
pub fn ask(out: &mut impl Write, input: &mut impl BufRead) -> CliResult<ScaffoldAnswers> {
    let name = prompt(out, input, "tool name")?;
    let version = prompt(out, input, "version [1.0]")?;
    let linux = prompt(out, input, "linux command")?;
    let windows = prompt(out, input, "windows command (blank for none)")?;
    let inputs = prompt(out, input, "inputs, e.g. x:Float,mesh:FileRef:constant")?;
    let outputs = prompt(out, input, "outputs, e.g. y:Float")?;
    let documentation = prompt(out, input, "documentation")?;
    let some = |s: String| (!s.is_empty()).then_some(s);
    Ok(ScaffoldAnswers {
        name,
        version: if version.is_empty() { "1.0".into() } else { version },
        linux_command: some(linux),
        windows_command: some(windows),
        inputs: endpoint_list(&inputs)?,
        outputs: endpoint_list(&outputs)?,
        documentation: some(documentation),
        ..Default::default()
    })
}

pub fn integrate(dir: &ConfigDir, opts: IntegrateOptions) -> CliResult<u8> {
    let text = match &opts.from {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            parse_descriptor(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?.to_json()
        }
        None => {
            let answers = if opts.answers.name.is_empty() {
                ask(&mut io::stderr(), &mut io::stdin().lock())?
            } else {
                opts.answers
            };
            scaffold_descriptor(&answers).map_err(|e| CliError::usage(format!("{}: {e}", e.code())))?
        }
    };
    let desc = parse_descriptor(&text).map_err(|e| CliError::usage(e.to_string()))?;
    let path = dir.tool_path(&desc.component_ref());
    if path.exists() && !opts.force {
        return Err(CliError::failure(format!("{} is already installed at {} (use --force to replace)", desc.component_ref(), path.display())));
    }
    fs::create_dir_all(dir.tools_dir()).map_err(|e| io_error(&dir.tools_dir(), e))?;
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    println!("installed {} at {}", desc.component_ref(), path.display());
    Ok(EXIT_OK)
}

pub fn list(dir: &ConfigDir, remote: bool, json: bool) -> CliResult<u8> {
    let cfg = dir.load()?;
    if remote {
        let node = dir.open_node(Some(ephemeral_id()))?;
        connect_peers(&node, &cfg);
        let rows = node.remote_components();
        node.shutdown();
        if json {
            let out: Vec<_> = rows
                .iter()
                .map(|r| json!({"component": r.component, "publisher": r.publisher, "group": r.group, "inputs": r.summary.inputs, "outputs": r.summary.outputs}))
                .collect();
            print_json(&out);
        } else if rows.is_empty() {
            println!("no remote tools visible");
        } else {
            for r in rows {
                println!("{:<32} {:<34} {}", r.component.to_string(), r.publisher, r.group);
            }
        }
        return Ok(EXIT_OK);
    }
    let tools = dir.tools()?;
    let groups_of = |c: &ComponentRef| -> Vec<String> {
        cfg.published.iter().filter(|p| &p.component == c).map(|p| p.group.clone()).collect()
    };
    if json {
        let out: Vec<_> = tools
            .iter()
            .map(|(path, d)| {
                let decls = |es: &[toolweave_core::model::Endpoint]| es.iter().map(EndpointDecl::from_endpoint).collect::<Vec<_>>();
                json!({
                    "component": d.component_ref(),
                    "file": path,
                    "inputs": decls(&d.inputs),
                    "outputs": decls(&d.outputs),
                    "published": groups_of(&d.component_ref()),
                })
            })
            .collect();
        print_json(&out);
    } else if tools.is_empty() {
        println!("no tools installed");
    } else {
        for (_, d) in &tools {
            let groups = groups_of(&d.component_ref());
            let shown = if groups.is_empty() { "-".to_owned() } else { groups.join(",") };
            println!("{:<32} published: {shown}", d.component_ref().to_string());
        }
    }
    Ok(EXIT_OK)
}

fn parse_ref(text: &str) -> CliResult<ComponentRef> {
    text.parse().map_err(|e| CliError::usage(format!("`{text}`: {e}")))
}

pub fn publish(dir: &ConfigDir, component: &str, group: &str) -> CliResult<u8> {
    let component = parse_ref(component)?;
    if !dir.tool_path(&component).exists() && !dir.tools()?.iter().any(|(_, d)| d.component_ref() == component) {
        return Err(CliError::failure(format!("unknown tool {component}")));
    }
    if group != PUBLIC_GROUP && dir.keys()?.get(group).is_none() {
        return Err(CliError::failure(format!("unknown group `{group}`")));
    }
    let mut cfg = dir.load()?;
    let entry = Publication { component: component.clone(), group: group.to_owned() };
    if !cfg.published.contains(&entry) {
        cfg.published.push(entry);
        dir.save(&cfg)?;
    }
    println!("published {component} to {group}");
    Ok(EXIT_OK)
}

pub fn unpublish(dir: &ConfigDir, component: &str, group: Option<&str>) -> CliResult<u8> {
    let component = parse_ref(component)?;
    let mut cfg = dir.load()?;
    let before = cfg.published.len();
    cfg.published.retain(|p| !(p.component == component && group.map_or(true, |g| p.group == g)));
    if cfg.published.len() == before {
        return Err(CliError::failure(format!("{component} is not published{}", group.map(|g| format!(" to {g}")).unwrap_or_default())));
    }
    dir.save(&cfg)?;
    println!("unpublished {component}");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use toolweave_core::datum::DatumType;

    #[test]
    fn endpoint_flags() {
        let e = parse_endpoint("mesh:FileRef:constant").unwrap();
        assert_eq!((e.name.as_str(), e.datum_type, e.handling), ("mesh", DatumType::FileRef, Some(Handling::Constant)));
        assert!(parse_endpoint("x").is_err());
        assert!(parse_endpoint("x:Complex").is_err());
        assert!(parse_endpoint("x:Float:sometimes").is_err());
    }

    #[test]
    fn interactive_answers() {
        let script = "sim\n\nsim.sh ${in:x}\n\nx:Float\ny:Float\nruns the sim\n";
        let answers = ask(&mut Vec::new(), &mut io::Cursor::new(script)).unwrap();
        assert_eq!(answers.name, "sim");
        assert_eq!(answers.version, "1.0");
        assert_eq!(answers.windows_command, None);
        assert_eq!(answers.inputs.len(), 1);
        assert!(scaffold_descriptor(&answers).is_ok());
    }
}
