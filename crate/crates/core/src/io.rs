//! Text formats: trace and indicator CSV files, run metadata, flat key-value
//! configuration files and custom problem definitions.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Arc;

use thiserror::Error;

use crate::adapt::{AdaptRun, TraceRow};
use crate::estimate::{IndicatorReport, OscReport};
use crate::mesh::{Domain, Mesh};
use crate::problems::{AffineTensor, Coefficient, ProblemSpec, ScalarField};

pub const TRACE_HEADER: &str = "k,n_elem,n_flux_dofs,eta2,osc2,osc_f2,n_marked,E2,quasi_err,secs";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Fixed-column trace. Floats use the shortest representation that round-trips.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e},{},{},{},{:e}",
            r.k,
            r.n_elem,
            r.n_flux_dofs,
            r.eta2,
            r.osc2,
            r.osc_f2,
            r.n_marked,
            opt(r.e2),
            opt(r.quasi_err),
            r.secs
        );
    }
    s
}

/// Error components and the complexity ratio per iteration.
pub fn errors_csv(run: &AdaptRun) -> String {
    let mut s = String::from("k,n_elem,flux_err,div_err,disp_err,surrogate,complexity\n");
    for r in &run.rows {
        let e = r.errors;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.k,
            r.n_elem,
            opt(e.map(|e| e.flux_err)),
            opt(e.map(|e| e.div_err)),
            opt(e.map(|e| e.disp_err)),
            e.map_or(String::new(), |e| e.surrogate.to_string()),
            opt(r.complexity)
        );
    }
    s
}

/// Per-element indicator and oscillation dump.
pub fn indicators_csv(ind: &IndicatorReport, osc: &OscReport) -> String {
    let mut s = String::from("elem,data,curl,jump,displacement,curl_osc,jump_osc,data_osc,displacement_osc,h\n");
    for t in 0..ind.len() {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            t,
            ind.data[t],
            ind.curl[t],
            ind.jump[t],
            ind.displacement[t],
            osc.curl[t],
            osc.jump[t],
            osc.data[t],
            osc.displacement[t],
            ind.h[t]
        );
    }
    s
}

/// Element centroids with the discrete displacement and flux, for plotting.
pub fn solution_csv(mesh: &Mesh, p: &[f64], u: &[f64]) -> String {
    let mut s = String::from("elem,x,y,u,p1,p2\n");
    for (t, ut) in u.iter().enumerate().take(mesh.n_elements()) {
        let c = mesh.corners(t);
        let x = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
        let q = crate::fem::LocalFlux::new(mesh, p, t).eval(x);
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{:e}", t, x[0], x[1], ut, q[0], q[1]);
    }
    s
}

/// Parses `key = value` lines. `#` and `;` start comments; `[section]`
/// headers prefix the following keys with `section.`.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

fn numbers(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split_whitespace()
        .map(|t| {
            t.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| ConfigError::Value {
                key: key.into(),
                msg: format!("`{t}` is not a finite number"),
            })
        })
        .collect()
}

/// Builds a problem from the `domain`, `coefficient.*` and `source.*` keys.
///
/// Regions are the triangles of the initial mesh. `coefficient.<r>` holds one
/// number (scalar `a`), three (`a11 a12 a22`), or nine (each entry affine:
/// constant, x, y). `source.<r>` holds up to six coefficients of
/// `c0 + c1 x + c2 y + c3 x^2 + c4 x y + c5 y^2`. The `default` region covers
/// the rest. Dirichlet data is homogeneous.
pub fn custom_problem(cfg: &BTreeMap<String, String>) -> Result<ProblemSpec, ConfigError> {
    let domain: Domain = cfg
        .get("domain")
        .ok_or_else(|| ConfigError::Value {
            key: "domain".into(),
            msg: "required for custom problems".into(),
        })?
        .parse()
        .map_err(|e| ConfigError::Value {
            key: "domain".into(),
            msg: format!("{e}"),
        })?;
    let n = Mesh::create_initial(domain)
        .map_err(|e| ConfigError::Value {
            key: "domain".into(),
            msg: e.to_string(),
        })?
        .n_elements();
    let region_value = |prefix: &str, r: usize| {
        cfg.get(&format!("{prefix}.{r}"))
            .map(|v| (format!("{prefix}.{r}"), v))
            .or_else(|| cfg.get(&format!("{prefix}.default")).map(|v| (format!("{prefix}.default"), v)))
    };
    for key in cfg.keys() {
        for prefix in ["coefficient.", "source."] {
            if let Some(rest) = key.strip_prefix(prefix) {
                let ok = rest == "default" || rest.parse::<usize>().is_ok_and(|r| r < n);
                if !ok {
                    return Err(ConfigError::Value {
                        key: key.clone(),
                        msg: format!("region must be `default` or an index below {n}"),
                    });
                }
            }
        }
    }
    let mut tensors = Vec::with_capacity(n);
    for r in 0..n {
        let t = match region_value("coefficient", r) {
            None => AffineTensor::constant(1.0, 0.0, 1.0),
            Some((key, v)) => {
                let c = numbers(&key, v)?;
                let t = match c.len() {
                    1 => AffineTensor::constant(c[0], 0.0, c[0]),
                    3 => AffineTensor::constant(c[0], c[1], c[2]),
                    9 => AffineTensor {
                        a11: [c[0], c[1], c[2]],
                        a12: [c[3], c[4], c[5]],
                        a22: [c[6], c[7], c[8]],
                    },
                    k => {
                        return Err(ConfigError::Value {
                            key,
                            msg: format!("expected 1, 3 or 9 numbers, got {k}"),
                        })
                    }
                };
                t
            }
        };
        tensors.push(t);
    }
    let mut sources = Vec::with_capacity(n);
    for r in 0..n {
        let mut c = [0.0; 6];
        if let Some((key, v)) = region_value("source", r) {
            let vals = numbers(&key, v)?;
            if vals.is_empty() || vals.len() > 6 {
                return Err(ConfigError::Value {
                    key,
                    msg: format!("expected 1 to 6 numbers, got {}", vals.len()),
                });
            }
            c[..vals.len()].copy_from_slice(&vals);
        }
        sources.push(c);
    }
    let sources = Arc::new(sources);
    let name = cfg.get("name").cloned().unwrap_or_else(|| "custom".into());
    let problem = ProblemSpec {
        name,
        domain,
        coefficient: Coefficient::PiecewiseAffine(tensors),
        f: ScalarField::new(move |x, key| {
            let c = &sources[key.root_id()];
            c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[0] * x[0] + c[4] * x[0] * x[1] + c[5] * x[1] * x[1]
        }),
        dirichlet: None,
        exact: None,
    };
    // Positive definiteness at the root vertices; affine entries cannot lose it
    // in between only if the determinant stays positive, which assembly checks.
    let m = Mesh::create_initial(domain).expect("checked above");
    for t in 0..m.n_elements() {
        for x in m.corners(t) {
            if !crate::problems::is_spd(problem.coefficient.a(x, m.key(t))) {
                return Err(ConfigError::Value {
                    key: format!("coefficient.{}", m.key(t).root_id()),
                    msg: format!("not symmetric positive definite at {x:?}"),
                });
            }
        }
    }
    Ok(problem)
}

/// JSON sidecar describing a run.
pub fn metadata_json(meta: &serde_json::Value) -> String {
    serde_json::to_string_pretty(meta).expect("serializable") + "\n"
}
