//! Configuration files: a TOML schema with per-mode arrays, dotted-key
//! overrides, canonical emission, and hashing.
//!
//! Schema:
//!
//! ```toml
//! [modes]
//! omega = [1.0, 0.9]        # resonance frequencies, ascending preferred
//! gamma = [4e-5, 3e-5]      # intrinsic damping rates
//! nbar = [100.0, 100.0]     # bath occupancies
//! coupling_g = [0.16, 0.1]  # effective optomechanical couplings G_j
//! gain_cd = [0.8, 0.8]      # feedback gains
//!
//! [cavity]
//! kappa = 3.0
//! omega_fb = 3.5
//! eta = 1.0                 # optional, defaults to 1
//! detuning = 0.0            # optional, defaults to 0
//! ```
//!
//! Instead of `coupling_g` a file may carry a physical `[drive]` table
//! (`g_om` per mode, `epsilon`, `detuning0`); the loader then computes the
//! classical intracavity working point and derives the couplings from the
//! steady amplitude. Unknown keys anywhere are rejected.

use crate::error::{Error, Result};
use crate::model::{
    effective_couplings, intracavity_steady_state, CavitySpec, MechanicalMode, PhysicalDrive,
    SystemConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_eta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeArrays {
    omega: Vec<f64>,
    gamma: Vec<f64>,
    nbar: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coupling_g: Option<Vec<f64>>,
    gain_cd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CavityTable {
    kappa: f64,
    omega_fb: f64,
    #[serde(default = "default_eta")]
    eta: f64,
    #[serde(default)]
    detuning: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriveTable {
    g_om: Vec<f64>,
    epsilon: f64,
    detuning0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    modes: ModeArrays,
    cavity: CavityTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    drive: Option<DriveTable>,
}

/// A validated configuration together with its canonical text form.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub system: SystemConfig,
    /// Canonical TOML of the fully resolved parameter set (couplings
    /// explicit, overrides applied).
    pub canonical: String,
    /// First 16 hex characters of the SHA-256 of `canonical`.
    pub hash: String,
}

/// Read, override, resolve, and validate a configuration file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, overrides)
}

/// Same as [`load_config`] but from an in-memory string.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let mut value: toml::Value =
        text.parse().map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
    for entry in overrides {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            Error::InvalidParameter(format!("override `{entry}` is not KEY=VALUE"))
        })?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }
    let file: ConfigFile = value.try_into().map_err(classify_toml_error)?;
    let system = resolve(file)?;
    system.validate()?;
    let canonical = emit_config(&system);
    let hash = short_hash(&canonical);
    Ok(LoadedConfig { system, canonical, hash })
}

fn classify_toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    if msg.starts_with("unknown field") {
        Error::UnknownKey(msg)
    } else {
        Error::ConfigParse(e.to_string())
    }
}

/// Set `key` (dotted path; numeric segments index arrays) to the TOML value
/// parsed from `raw`. Missing tables along the path are created; array
/// indices must already exist.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::InvalidParameter("override key is empty".into()));
    }
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .map_err(|e: toml::de::Error| {
            Error::InvalidParameter(format!("override value `{raw}` is not valid: {}", e.message()))
        })?
        .get("v")
        .cloned()
        .expect("wrapper key exists");
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth == segments.len() - 1;
        if let Ok(index) = seg.parse::<usize>() {
            let arr = node.as_array_mut().ok_or_else(|| {
                Error::InvalidParameter(format!("`{key}`: segment `{seg}` indexes a non-array"))
            })?;
            if index >= arr.len() {
                return Err(Error::InvalidParameter(format!(
                    "`{key}`: index {index} out of bounds (length {})",
                    arr.len()
                )));
            }
            if last {
                arr[index] = parsed;
                return Ok(());
            }
            node = &mut arr[index];
        } else {
            let table = node.as_table_mut().ok_or_else(|| {
                Error::InvalidParameter(format!("`{key}`: segment `{seg}` indexes a non-table"))
            })?;
            if last {
                table.insert((*seg).to_string(), parsed);
                return Ok(());
            }
            node = table
                .entry((*seg).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    unreachable!("loop always returns on the last segment")
}

fn resolve(mut file: ConfigFile) -> Result<SystemConfig> {
    let n = file.modes.omega.len();
    if n == 0 {
        return Err(Error::Validation("modes.omega must not be empty".into()));
    }
    let check_len = |name: &str, len: usize| -> Result<()> {
        if len != n {
            Err(Error::Validation(format!(
                "modes.{name} has {len} entries but modes.omega has {n}"
            )))
        } else {
            Ok(())
        }
    };
    check_len("gamma", file.modes.gamma.len())?;
    check_len("nbar", file.modes.nbar.len())?;
    check_len("gain_cd", file.modes.gain_cd.len())?;
    let cavity = CavitySpec {
        kappa: file.cavity.kappa,
        omega_fb: file.cavity.omega_fb,
        eta: file.cavity.eta,
        detuning: file.cavity.detuning,
    };
    let couplings = match (file.modes.coupling_g.take(), file.drive.take()) {
        (Some(_), Some(_)) => {
            return Err(Error::Validation(
                "give either modes.coupling_g or a [drive] table, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Validation(
                "one of modes.coupling_g or a [drive] table is required".into(),
            ))
        }
        (Some(g), None) => {
            check_len("coupling_g", g.len())?;
            g
        }
        (None, Some(drive)) => {
            if drive.g_om.len() != n {
                return Err(Error::Validation(format!(
                    "drive.g_om has {} entries but modes.omega has {n}",
                    drive.g_om.len()
                )));
            }
            let provisional = SystemConfig {
                modes: assemble_modes(&file.modes, vec![0.0; n]),
                cavity: cavity.clone(),
            };
            let drive = PhysicalDrive {
                g_om: drive.g_om,
                epsilon: drive.epsilon,
                detuning0: drive.detuning0,
            };
            let working_point = intracavity_steady_state(&drive, &provisional)?;
            if working_point.root_multiplicity > 1 {
                log::warn!(
                    "drive is bistable ({} photon-number roots); using amplitude {}",
                    working_point.root_multiplicity,
                    working_point.amplitude
                );
            }
            effective_couplings(&drive, working_point.amplitude)
        }
    };
    Ok(SystemConfig { modes: assemble_modes(&file.modes, couplings), cavity })
}

fn assemble_modes(arrays: &ModeArrays, coupling: Vec<f64>) -> Vec<MechanicalMode> {
    arrays
        .omega
        .iter()
        .zip(&arrays.gamma)
        .zip(&arrays.nbar)
        .zip(&arrays.gain_cd)
        .zip(coupling)
        .map(|((((&omega, &gamma), &nbar), &gain_cd), coupling_g)| MechanicalMode {
            omega,
            gamma,
            nbar,
            coupling_g,
            gain_cd,
        })
        .collect()
}

/// Canonical TOML for a resolved configuration. Loading the emitted text
/// reproduces the configuration exactly (floats print in shortest
/// round-trip form).
pub fn emit_config(config: &SystemConfig) -> String {
    let file = ConfigFile {
        modes: ModeArrays {
            omega: config.modes.iter().map(|m| m.omega).collect(),
            gamma: config.modes.iter().map(|m| m.gamma).collect(),
            nbar: config.modes.iter().map(|m| m.nbar).collect(),
            coupling_g: Some(config.modes.iter().map(|m| m.coupling_g).collect()),
            gain_cd: config.modes.iter().map(|m| m.gain_cd).collect(),
        },
        cavity: CavityTable {
            kappa: config.cavity.kappa,
            omega_fb: config.cavity.omega_fb,
            eta: config.cavity.eta,
            detuning: config.cavity.detuning,
        },
        drive: None,
    };
    toml::to_string(&file).expect("resolved config serializes")
}

/// First 16 hex characters of SHA-256.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_mode_reference;

    const TWO_MODE: &str = r#"
[modes]
omega = [1.0, 0.9]
gamma = [4e-5, 3e-5]
nbar = [100.0, 100.0]
coupling_g = [0.16, 0.1]
gain_cd = [0.8, 0.8]

[cavity]
kappa = 3.0
omega_fb = 3.5
"#;

    #[test]
    fn loads_two_mode_file() {
        let loaded = parse_config_str(TWO_MODE, &[]).unwrap();
        let cfg = loaded.system;
        assert_eq!(cfg.n_modes(), 2);
        assert_eq!(cfg.modes[0].gamma, 4e-5);
        assert_eq!(cfg.modes[1].gamma, 3e-5);
        assert_eq!(cfg.modes[0].coupling_g, 0.16);
        assert_eq!(cfg.modes[1].coupling_g, 0.1);
        assert_eq!(cfg.modes[0].gain_cd, 0.8);
        assert_eq!(cfg.cavity.kappa, 3.0);
        assert_eq!(cfg.cavity.omega_fb, 3.5);
        assert_eq!(cfg.cavity.eta, 1.0, "eta defaults to 1");
        assert_eq!(cfg.cavity.detuning, 0.0, "detuning defaults to 0");
        assert_eq!(loaded.hash.len(), 16);
    }

    #[test]
    fn array_length_mismatch_is_a_validation_error() {
        let text = r#"
[modes]
omega = [1.0, 1.1, 1.2]
gamma = [1e-5, 1e-5]
nbar = [10.0, 10.0, 10.0]
coupling_g = [0.1, 0.1, 0.1]
gain_cd = [0.5, 0.5, 0.5]

[cavity]
kappa = 3.0
omega_fb = 3.5
"#;
        match parse_config_str(text, &[]) {
            Err(Error::Validation(msg)) => assert!(msg.contains("gamma"), "{msg}"),
            other => panic!("expected Validation, got {other:?}"),
        }
    }

    #[test]
    fn override_replaces_scalar_array_element_and_whole_array() {
        let loaded = parse_config_str(
            TWO_MODE,
            &[
                "cavity.kappa=5".to_string(),
                "modes.omega.1=0.95".to_string(),
                "modes.nbar=[50.0, 60.0]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(loaded.system.cavity.kappa, 5.0, "integer literal coerces to float");
        assert_eq!(loaded.system.modes[1].omega, 0.95);
        assert_eq!(loaded.system.modes[0].nbar, 50.0);
        assert_eq!(loaded.system.modes[1].nbar, 60.0);
    }

    #[test]
    fn override_errors_are_descriptive() {
        let mut v: toml::Value = TWO_MODE.parse().unwrap();
        match apply_override(&mut v, "modes.omega.7", "1.0") {
            Err(Error::InvalidParameter(msg)) => assert!(msg.contains("out of bounds"), "{msg}"),
            other => panic!("{other:?}"),
        }
        match apply_override(&mut v, "cavity.kappa.0", "1.0") {
            Err(Error::InvalidParameter(msg)) => assert!(msg.contains("non-array"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_config_str(TWO_MODE, &["nonsense".to_string()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TWO_MODE.replace("omega_fb = 3.5", "omega_fb = 3.5\nbandwith = 2.0");
        match parse_config_str(&text, &[]) {
            Err(Error::UnknownKey(msg)) => assert!(msg.contains("bandwith"), "{msg}"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        // Unknown top-level table.
        let text = format!("{TWO_MODE}\n[laser]\npower = 1.0\n");
        assert!(matches!(parse_config_str(&text, &[]), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let text = "[modes\nomega = [1.0]";
        match parse_config_str(text, &[]) {
            Err(Error::ConfigParse(msg)) => {
                assert!(msg.contains("line 1"), "{msg}");
            }
            other => panic!("expected ConfigParse, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = two_mode_reference();
        let emitted = emit_config(&cfg);
        let reloaded = parse_config_str(&emitted, &[]).unwrap();
        assert_eq!(reloaded.system, cfg);
        // Awkward floats survive the trip too.
        let mut cfg = cfg;
        cfg.modes[0].gamma = 1.0 / 3.0e5;
        cfg.modes[1].nbar = 0.1 + 0.2;
        let reloaded = parse_config_str(&emit_config(&cfg), &[]).unwrap();
        assert_eq!(reloaded.system, cfg);
    }

    #[test]
    fn drive_table_derives_couplings_from_working_point() {
        let text = r#"
[modes]
omega = [1.0, 0.9]
gamma = [4e-5, 3e-5]
nbar = [100.0, 100.0]
gain_cd = [0.8, 0.8]

[cavity]
kappa = 3.0
omega_fb = 3.5

[drive]
g_om = [0.001, 0.000625]
epsilon = 100.0
detuning0 = 0.0
"#;
        let loaded = parse_config_str(text, &[]).unwrap();
        // At zero detuning the cubic is linear in the photon number:
        // u = eps^2 / kappa^2 (the static spring shift feeds back through
        // the detuning, which starts and stays near zero for tiny g_om),
        // so |<A>| ~ eps / kappa and G ~ sqrt(2) g_om eps / kappa.
        let expected0 = std::f64::consts::SQRT_2 * 0.001 * (100.0 / 3.0);
        let g0 = loaded.system.modes[0].coupling_g;
        assert!((g0 - expected0).abs() < 1e-3 * expected0, "{g0} vs {expected0}");
        let ratio = loaded.system.modes[1].coupling_g / g0;
        assert!((ratio - 0.625).abs() < 1e-12, "couplings keep the g_om ratios: {ratio}");
    }

    #[test]
    fn coupling_and_drive_are_mutually_exclusive() {
        let text = format!("{TWO_MODE}\n[drive]\ng_om = [0.001, 0.001]\nepsilon = 10.0\ndetuning0 = 0.0\n");
        assert!(matches!(parse_config_str(&text, &[]), Err(Error::Validation(_))));
        let text = TWO_MODE.replace("coupling_g = [0.16, 0.1]\n", "");
        assert!(matches!(parse_config_str(&text, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = parse_config_str(TWO_MODE, &[]).unwrap();
        let b = parse_config_str(TWO_MODE, &[]).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = parse_config_str(TWO_MODE, &["cavity.kappa=5".to_string()]).unwrap();
        assert_ne!(a.hash, c.hash);
    }
}
