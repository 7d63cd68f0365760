//! `group create | export-key | import-key | list`.

use serde_json::json;
use toolweave_core::model::is_identifier;
use toolweave_net::crypto::{GroupKey, KeyRing};

use crate::config::{ConfigDir, PUBLIC_GROUP};
use crate::{print_json, CliError, CliResult, EXIT_OK};

fn check_name(name: &str) -> CliResult {
    if name == PUBLIC_GROUP || !is_identifier(name) {
        return Err(CliError::usage(format!("`{name}` is not a usable group name")));
    }
    Ok(())
}

fn save(dir: &ConfigDir, key: &GroupKey) -> CliResult {
    KeyRing::save_key(&dir.keys_dir(), key).map_err(|e| CliError::environment(e.to_string()))
}

pub fn create(dir: &ConfigDir, name: &str) -> CliResult<u8> {
    check_name(name)?;
    if dir.keys()?.get(name).is_some() {
        return Err(CliError::failure(format!("group `{name}` already exists")));
    }
    let key = GroupKey::generate(name);
    save(dir, &key)?;
    println!("{key}");
    Ok(EXIT_OK)
}

pub fn export_key(dir: &ConfigDir, name: &str) -> CliResult<u8> {
    let keys = dir.keys()?;
    let key = keys.get(name).ok_or_else(|| CliError::failure(format!("unknown group `{name}`")))?;
    println!("{}", key.secret_hex());
    Ok(EXIT_OK)
}

/// Installs a hex secret under `name`, replacing a key of the same name.
pub fn import_key(dir: &ConfigDir, name: &str, secret_hex: &str) -> CliResult<u8> {
    check_name(name)?;
    let key = GroupKey::from_hex(name, secret_hex).map_err(|e| CliError::usage(format!("{}: {e}", e.code())))?;
    save(dir, &key)?;
    println!("{key}");
    Ok(EXIT_OK)
}

pub fn list(dir: &ConfigDir, json: bool) -> CliResult<u8> {
    let keys = dir.keys()?;
    if json {
        let out: Vec<_> = keys.iter().map(|k| json!({"name": k.name, "key_id": k.key_id()})).collect();
        print_json(&out);
    } else if keys.is_empty() {
        println!("no groups");
    } else {
        for k in keys.iter() {
            println!("{k}");
        }
    }
    Ok(EXIT_OK)
}
