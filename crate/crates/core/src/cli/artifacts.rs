//! Artifact contents and the single end-of-run writer.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::admittance::{principal_phase_deg, unwrap_deg, Channel, DqAdmittance};
use crate::experiments::StepExperimentPair;
use crate::plant::SimulationRecord;
use crate::ratfit::FitResult;

pub const TIMESERIES_HEADER: &str = "t,v_gd,v_gq,i_od,i_oq";

/// Files of one run, written together at the end.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: impl Into<String>, content: impl Into<Vec<u8>>) {
        self.files.push((name.into(), content.into()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.files.iter().any(|(n, _)| n == name)
    }

    /// Writes every staged file plus `manifest.json` into `dir`. On failure
    /// the files already written are removed.
    pub fn commit(self, dir: &Path, manifest_extra: Value) -> std::io::Result<ArtifactSet> {
        fs::create_dir_all(dir)?;
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| {
            let mut entries = Vec::new();
            for (name, bytes) in &self.files {
                let path = dir.join(name);
                fs::write(&path, bytes)?;
                written.push(path.clone());
                entries.push(ArtifactFile {
                    name: name.clone(),
                    path,
                    bytes: bytes.len(),
                    sha256: sha256_hex(bytes),
                });
            }
            let manifest = manifest_json(&entries, manifest_extra);
            let path = dir.join("manifest.json");
            fs::write(&path, manifest)?;
            written.push(path.clone());
            Ok(ArtifactSet {
                directory: dir.to_path_buf(),
                files: entries,
                manifest: path,
            })
        })();
        if result.is_err() {
            for p in &written {
                let _ = fs::remove_file(p);
            }
        }
        result
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactFile {
    pub name: String,
    pub path: PathBuf,
    pub bytes: usize,
    pub sha256: String,
}

/// Emitted files and the manifest that lists them.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSet {
    pub directory: PathBuf,
    pub files: Vec<ArtifactFile>,
    pub manifest: PathBuf,
}

impl ArtifactSet {
    pub fn file(&self, name: &str) -> Option<&ArtifactFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn manifest_json(files: &[ArtifactFile], extra: Value) -> String {
    let list: Vec<Value> = files
        .iter()
        .map(|f| json!({ "name": f.name, "bytes": f.bytes, "sha256": f.sha256 }))
        .collect();
    let mut m = json!({
        "generated_at": humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string(),
        "files": list,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut m, extra) {
        dst.extend(src);
    }
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    s
}

/// `{:e}`, the shortest scientific form that round-trips.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn timeseries_csv(rec: &SimulationRecord) -> String {
    let mut s = format!("{TIMESERIES_HEADER}\n");
    let (v, i) = (&rec.v_g, &rec.i_o);
    for k in 0..rec.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            num(v.d.time(k)),
            num(v.d.samples()[k]),
            num(v.q.samples()[k]),
            num(i.d.samples()[k]),
            num(i.q.samples()[k])
        );
    }
    s
}

/// Measured channel responses and the fitted models' step responses, in
/// the measured (inverter) sign, time from the step instant.
pub fn sem_timefit_csv(pair: &StepExperimentPair, sem: &DqAdmittance) -> String {
    let mut cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut len = usize::MAX;
    let mut dt = pair.dt;
    for c in Channel::ALL {
        let (u, y) = pair.response(c.input(), c.output());
        dt = y.dt();
        let model = match &sem.channel(c).fit {
            Some(fit) => fit.tf.scaled(-1.0).simulate_response(&u).into_samples(),
            None => vec![0.0; y.len()],
        };
        len = len.min(y.len()).min(model.len());
        cols.push((y.into_samples(), model));
    }
    let mut s = String::from("t");
    for c in Channel::ALL {
        let _ = write!(s, ",{c}_measured,{c}_model");
    }
    s.push('\n');
    for k in 0..len {
        s.push_str(&num(k as f64 * dt));
        for (y, m) in &cols {
            let _ = write!(s, ",{},{}", num(y[k]), num(m[k]));
        }
        s.push('\n');
    }
    s
}

fn mag_db(z: Complex64) -> f64 {
    20.0 * z.norm().log10()
}

fn unwrapped(values: &[Complex64]) -> Vec<f64> {
    let mut p: Vec<f64> = values.iter().map(|&z| principal_phase_deg(z)).collect();
    unwrap_deg(&mut p);
    p
}

/// Raw sweep points next to the rational fit, one row per frequency.
pub fn sfra_fit_csv(sfra: &DqAdmittance) -> crate::Result<String> {
    let freqs = sfra.measured_frequencies().unwrap_or(&[]).to_vec();
    let mut cols = Vec::new();
    for c in Channel::ALL {
        let ch = sfra.channel(c);
        let meas: Vec<Complex64> = ch
            .measured
            .as_ref()
            .map(|m| m.values().to_vec())
            .unwrap_or_default();
        let fit = freqs
            .iter()
            .map(|&f| ch.model_at(f).map_err(|e| e.in_channel(c)))
            .collect::<crate::Result<Vec<_>>>()?;
        cols.push((
            meas.iter().map(|&z| mag_db(z)).collect::<Vec<_>>(),
            unwrapped(&meas),
            fit.iter().map(|&z| mag_db(z)).collect::<Vec<_>>(),
            unwrapped(&fit),
        ));
    }
    let mut s = String::from("f_hz");
    for c in Channel::ALL {
        let _ = write!(
            s,
            ",{c}_meas_mag_db,{c}_meas_phase_deg,{c}_fit_mag_db,{c}_fit_phase_deg"
        );
    }
    s.push('\n');
    for (k, &f) in freqs.iter().enumerate() {
        s.push_str(&num(f));
        for (a, b, c, d) in &cols {
            let _ = write!(
                s,
                ",{},{},{},{}",
                num(a[k]),
                num(b[k]),
                num(c[k]),
                num(d[k])
            );
        }
        s.push('\n');
    }
    Ok(s)
}

fn complex_list(mut v: Vec<Complex64>) -> Value {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Value::Array(v.iter().map(|z| json!([z.re, z.im])).collect())
}

pub fn fit_json(fit: &FitResult) -> Value {
    let (num_s, den_s) = fit.tf.coefficients_s();
    json!({
        "nrmse_percent": fit.nrmse_percent,
        "iterations": fit.iterations_used,
        "converged": fit.converged,
        "degenerate": fit.degenerate,
        "numerator_s": num_s,
        "denominator_s": den_s,
        "poles_rad_s": complex_list(fit.tf.poles()),
    })
}

/// Leading Hankel singular values kept in the diagnostics.
const SINGULAR_VALUES_KEPT: usize = 40;

pub fn admittance_json(y: &DqAdmittance) -> Value {
    let mut channels = serde_json::Map::new();
    for c in Channel::ALL {
        let ch = y.channel(c);
        let mut v = serde_json::Map::new();
        if let Some(d) = &ch.era {
            v.insert("chosen_order".into(), json!(d.chosen_order));
            v.insert("rank".into(), json!(d.rank));
            v.insert(
                "hankel_shape".into(),
                json!([d.hankel_shape.0, d.hankel_shape.1]),
            );
            v.insert("residualized_modes".into(), json!(d.residualized_modes));
            let kept: Vec<f64> = d
                .singular_values
                .iter()
                .take(SINGULAR_VALUES_KEPT)
                .copied()
                .collect();
            v.insert("singular_values".into(), json!(kept));
            v.insert("rational_exact".into(), json!(ch.rational_exact));
            if let crate::admittance::ChannelModel::StateSpace(sys) = &ch.model {
                v.insert("poles_rad_s".into(), complex_list(sys.poles()));
            }
        }
        if let Some(fit) = &ch.fit {
            v.insert("fit".into(), fit_json(fit));
        }
        if let Some(m) = &ch.measured {
            v.insert("measured_points".into(), json!(m.len()));
        }
        channels.insert(c.to_string(), Value::Object(v));
    }
    json!({
        "method": y.method.to_string(),
        "sign_convention": y.sign_convention(),
        "valid_range_hz": [y.valid_range.0, y.valid_range.1],
        "channels": channels,
    })
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

const CHANNEL_TITLES: [(&str, usize); 4] = [("Ydd", 0), ("Ydq", 1), ("Yqd", 2), ("Yqq", 3)];

/// Step record figure: grid voltage and inverter current of one experiment.
pub fn step_figure(data: &str, stem: &str, title: &str) -> String {
    format!(
        "# {title}\n\
set datafile separator ','\n\
set key autotitle columnhead\n\
set terminal pngcairo size 1000,700\n\
set output '{stem}.png'\n\
set multiplot layout 2,1 title '{title}'\n\
set ylabel 'v_g [V]'\n\
plot '{data}' using 1:2 with lines, '' using 1:3 with lines\n\
set xlabel 't [s]'\n\
set ylabel 'i_o [A]'\n\
plot '{data}' using 1:4 with lines, '' using 1:5 with lines\n\
unset multiplot\n"
    )
}

pub fn sem_figure(data: &str) -> String {
    let mut s = String::from(
        "# SEM time-domain fits against the measured step responses\n\
set datafile separator ','\n\
set key autotitle columnhead\n\
set terminal pngcairo size 1000,800\n\
set output 'fig5_sem_fit.png'\n\
set multiplot layout 2,2\n\
set xlabel 't [s]'\n",
    );
    for (name, i) in CHANNEL_TITLES {
        let _ = write!(
            s,
            "set title '{name}'\nplot '{data}' using 1:{} with lines, '' using 1:{} with lines dt 2\n",
            2 + 2 * i,
            3 + 2 * i
        );
    }
    s.push_str("unset multiplot\n");
    s
}

pub fn sfra_figure(data: &str) -> String {
    let mut s = String::from(
        "# SFRA measured points against the rational fit\n\
set datafile separator ','\n\
set key autotitle columnhead\n\
set terminal pngcairo size 1200,900\n\
set output 'fig6_sfra_fit.png'\n\
set logscale x\n\
set multiplot layout 2,4\n\
set xlabel 'f [Hz]'\n",
    );
    for (name, i) in CHANNEL_TITLES {
        let b = 2 + 4 * i;
        let _ = write!(
            s,
            "set title '{name} magnitude [dB]'\nplot '{data}' using 1:{} with points, '' using 1:{} with lines\n",
            b,
            b + 2
        );
    }
    for (name, i) in CHANNEL_TITLES {
        let b = 3 + 4 * i;
        let _ = write!(
            s,
            "set title '{name} phase [deg]'\nplot '{data}' using 1:{} with points, '' using 1:{} with lines\n",
            b,
            b + 2
        );
    }
    s.push_str("unset multiplot\n");
    s
}

/// Overlay of the per-method Bode tables.
pub fn bode_figure(tables: &[&str]) -> String {
    let mut s = String::from(
        "# Bode overlay of the identified dq admittance\n\
set datafile separator ','\n\
set terminal pngcairo size 1200,900\n\
set output 'fig7_bode.png'\n\
set logscale x\n\
set multiplot layout 2,4\n\
set xlabel 'f [Hz]'\n",
    );
    for (col, what) in [(4, "magnitude [dB]"), (5, "phase [deg]")] {
        for (name, _) in CHANNEL_TITLES {
            let plots: Vec<String> = tables
                .iter()
                .map(|t| {
                    format!(
                        "'{t}' every ::1 using 1:(strcol(2) eq '{name}' ? ${col} : NaN) with linespoints title '{}'",
                        t.trim_start_matches("bode_").trim_end_matches(".csv")
                    )
                })
                .collect();
            let _ = writeln!(s, "set title '{name} {what}'\nplot {}", plots.join(", "));
        }
    }
    s.push_str("unset multiplot\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, -3.25e-7, 1.0 / 3.0, 12000.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn commit_lists_every_file() {
        let dir = std::env::temp_dir().join(format!("dqid-artifacts-{}", std::process::id()));
        let mut st = Staged::default();
        st.add("a.csv", "x\n");
        st.add("b.txt", "y\n");
        let set = st.commit(&dir, json!({ "counters": { "n": 1 } })).unwrap();
        assert_eq!(set.files.len(), 2);
        let m: Value = serde_json::from_str(&fs::read_to_string(&set.manifest).unwrap()).unwrap();
        assert_eq!(m["files"][1]["name"], "b.txt");
        assert_eq!(m["files"][0]["sha256"], sha256_hex(b"x\n"));
        assert_eq!(m["counters"]["n"], 1);
        fs::remove_dir_all(&dir).unwrap();
    }
}
