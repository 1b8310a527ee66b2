use std::fs;
use std::path::Path;

use gje_core::alexandrov::ProblemFile;
use gje_core::genfun::{Builtin, GenFun, SpecFile, WindowS};

use crate::io::Failure;

/// Loads `--spec`: a JSON spec file, or `NAME[:n]` for a builtin
/// (`quadratic:2`, `G2`, ...; `n` defaults to 2).
pub fn load_spec(arg: &str) -> Result<GenFun, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {arg}: {e}")))?;
        let file: SpecFile = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed spec {arg}: {e}")))?;
        return GenFun::from_spec_file(&file).map_err(|e| Failure::usage(format!("invalid spec {arg}: {e}")));
    }
    let (name, n) = match arg.split_once(':') {
        Some((name, n)) => (name, n.parse::<usize>().map_err(|_| Failure::usage(format!("bad dimension in `{arg}`")))?),
        None => (arg, 2),
    };
    let kind = Builtin::from_name(name).map_err(|_| Failure::usage(format!("no spec file or builtin named `{arg}`")))?;
    GenFun::builtin(kind, n).map_err(|e| Failure::usage(e.to_string()))
}

pub fn load_window(arg: Option<&Path>, spec: &GenFun) -> Result<WindowS, Failure> {
    match arg {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            let w: WindowS = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed window: {e}")))?;
            if w.x0.len() != spec.n() {
                return Err(Failure::usage("window dimension does not match the spec"));
            }
            WindowS::new(w.x0, w.r1, w.r2, w.r3, w.y_core, w.u0).map_err(|e| Failure::usage(e.to_string()))
        }
        None => WindowS::default_for(spec).map_err(|e| Failure::new(2, e.to_string())),
    }
}

pub fn load_problem(path: &Path) -> Result<ProblemFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed problem {}: {e}", path.display())))
}
