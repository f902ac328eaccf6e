//! `key = value` configuration files.
//!
//! Blank lines and `#` comments are skipped. Lists are comma separated.
//! Unset keys keep their defaults; `preset = small` starts from
//! [`ModelConfig::small`] instead, wherever it appears in the file.
//!
//! ```text
//! preset = default
//! n_classes = 6
//! ablation = dual_ccm
//! aux.dims = 96, 192, 384, 768
//! ssm.dt_rank = auto
//! ssm.scan = chunked:64
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::ss2d::ScanMode;

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list4(key: &str, v: &str) -> Result<[usize; 4]> {
    let items = v
        .split(',')
        .map(|s| num::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly four values")))
}

fn scan_mode(key: &str, v: &str) -> Result<ScanMode> {
    match v.split_once(':') {
        None if v == "sequential" => Ok(ScanMode::Sequential),
        Some(("chunked", n)) => Ok(ScanMode::Chunked(num(key, n.trim())?)),
        _ => Err(Error::Config(format!(
            "`{key}`: expected `sequential` or `chunked:N`, got `{v}`"
        ))),
    }
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
        pairs.push((k, v));
    }
    let mut cfg = match pairs.iter().find(|(k, _)| *k == "preset").map(|p| p.1) {
        None | Some("default") => ModelConfig::default(),
        Some("small") => ModelConfig::small(),
        Some(p) => return Err(Error::Config(format!("unknown preset `{p}`"))),
    };
    for (k, v) in pairs {
        match k {
            "preset" => {}
            "n_classes" => cfg.n_classes = num(k, v)?,
            "input_channels" => cfg.input_channels = num(k, v)?,
            "ablation" => cfg.ablation = v.parse()?,
            "aux.dims" => cfg.aux.dims = list4(k, v)?,
            "aux.depths" => cfg.aux.depths = list4(k, v)?,
            "ssm.n_state" => cfg.aux.ssm.n_state = num(k, v)?,
            "ssm.dt_rank" => {
                cfg.aux.ssm.dt_rank = if v == "auto" { None } else { Some(num(k, v)?) }
            }
            "ssm.expand" => cfg.aux.ssm.expand = num(k, v)?,
            "ssm.scan" => cfg.aux.ssm.scan = scan_mode(k, v)?,
            "main.stem_width" => cfg.main.stem_width = num(k, v)?,
            "main.dims" => cfg.main.dims = list4(k, v)?,
            "main.depths" => cfg.main.depths = list4(k, v)?,
            "ccm.window" => cfg.ccm.window = num(k, v)?,
            "ccm.head_dim" => cfg.ccm.head_dim = num(k, v)?,
            "decoder.width" => cfg.decoder_width = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Canonical text form; `parse_config(format_config(c)) == c`.
pub fn format_config(cfg: &ModelConfig) -> String {
    let l = |a: [usize; 4]| format!("{}, {}, {}, {}", a[0], a[1], a[2], a[3]);
    let dt_rank = cfg.aux.ssm.dt_rank.map_or("auto".to_string(), |r| r.to_string());
    let scan = match cfg.aux.ssm.scan {
        ScanMode::Sequential => "sequential".to_string(),
        ScanMode::Chunked(n) => format!("chunked:{n}"),
    };
    [
        format!("n_classes = {}", cfg.n_classes),
        format!("input_channels = {}", cfg.input_channels),
        format!("ablation = {}", cfg.ablation),
        format!("aux.dims = {}", l(cfg.aux.dims)),
        format!("aux.depths = {}", l(cfg.aux.depths)),
        format!("ssm.n_state = {}", cfg.aux.ssm.n_state),
        format!("ssm.dt_rank = {dt_rank}"),
        format!("ssm.expand = {}", cfg.aux.ssm.expand),
        format!("ssm.scan = {scan}"),
        format!("main.stem_width = {}", cfg.main.stem_width),
        format!("main.dims = {}", l(cfg.main.dims)),
        format!("main.depths = {}", l(cfg.main.depths)),
        format!("ccm.window = {}", cfg.ccm.window),
        format!("ccm.head_dim = {}", cfg.ccm.head_dim),
        format!("decoder.width = {}", cfg.decoder_width),
    ]
    .join("\n")
        + "\n"
}
