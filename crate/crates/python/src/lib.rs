//! Python bindings for the iotscope library: dictionary loading and
//! inspection, per-subscriber detection, infrastructure classification, and
//! the sampling arithmetic, exposed as the `iotscope_py` module.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};
use serde_json::Value as JsonValue;

use iotscope::config::DetectorConfig;
use iotscope::dates::DateRange;
use iotscope::detector::run_detection;
use iotscope::dictionary::IoTDictionary;
use iotscope::flow::{FlowReader, FLOW_CSV_HEADER};
use iotscope::pdns::{DnsStore, InfraClass};
use iotscope::psl::SuffixRules;
use iotscope::simulate::{sample_stream, SamplerConfig};

fn to_py_err(err: iotscope::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse_date(s: &str) -> PyResult<chrono::NaiveDate> {
    s.parse()
        .map_err(|_| PyValueError::new_err(format!("`{s}` is not a YYYY-MM-DD date")))
}

/// Recursively convert a JSON value into native Python objects.
fn json_to_py(py: Python<'_>, value: &JsonValue) -> PyResult<Py<PyAny>> {
    Ok(match value {
        JsonValue::Null => py.None(),
        JsonValue::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        JsonValue::Number(n) => {
            if let Some(i) = n.as_i64() {
                PyInt::new(py, i).into_any().unbind()
            } else {
                PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any().unbind()
            }
        }
        JsonValue::String(s) => PyString::new(py, s).into_any().unbind(),
        JsonValue::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        JsonValue::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

/// Minimum number of monitored domains a subscriber must contact, for a rule
/// with `n` domains at evidence fraction `d` in [0, 1].
#[pyfunction]
fn required_domain_count(n: usize, d: f64) -> PyResult<usize> {
    iotscope::dictionary::required_domain_count(n, d).map_err(to_py_err)
}

/// Probability that a flow of `n` packets stays visible under independent
/// per-packet sampling with probability `q`: 1 - (1 - q)^n.
#[pyfunction]
fn visibility_probability(n: u64, q: f64) -> f64 {
    iotscope::simulate::visibility_probability(n, q)
}

/// Keyed-digest identifier for a subscriber address, as the detector and its
/// outputs render it (lowercase hex).
#[pyfunction]
fn anonymize_subscriber(addr: &str, salt: &str) -> PyResult<String> {
    let addr: IpAddr = addr
        .parse()
        .map_err(|_| PyValueError::new_err(format!("`{addr}` is not an IP address")))?;
    let id = iotscope::roles::anonymize(addr, salt.as_bytes()).map_err(to_py_err)?;
    Ok(id.to_string())
}

/// Classify domain hosting infrastructure over a date window from a
/// passive-DNS JSONL file. Returns {domain: "dedicated"|"shared"|"insufficient"}.
#[pyfunction]
fn classify_infra(
    pdns_path: &str,
    psl_path: &str,
    domains: Vec<String>,
    window_start: &str,
    window_end: &str,
) -> PyResult<BTreeMap<String, String>> {
    let (store, _skipped) =
        DnsStore::from_jsonl(Path::new(pdns_path), false).map_err(to_py_err)?;
    let rules = SuffixRules::from_file(Path::new(psl_path)).map_err(to_py_err)?;
    let window = DateRange::new(parse_date(window_start)?, parse_date(window_end)?)
        .map_err(to_py_err)?;
    let days: Vec<chrono::NaiveDate> = window.days().collect();
    Ok(domains
        .into_iter()
        .map(|domain| {
            let class = match store.classify_domain_infra(&domain, &days, &rules) {
                InfraClass::Dedicated => "dedicated",
                InfraClass::Shared => "shared",
                InfraClass::Insufficient => "insufficient",
            };
            (domain, class.to_string())
        })
        .collect())
}

/// Thin one flow CSV into another with per-packet probability `q`, returning
/// the number of flows that stayed visible.
#[pyfunction]
fn sample_flows(input_csv: &str, output_csv: &str, q: f64, seed: u64) -> PyResult<usize> {
    let file = std::fs::File::open(input_csv)
        .map_err(|e| PyValueError::new_err(format!("{input_csv}: {e}")))?;
    let (flows, _skipped) = FlowReader::new(std::io::BufReader::new(file), input_csv, false)
        .read_all()
        .map_err(to_py_err)?;
    let sampled = sample_stream(&flows, &SamplerConfig { q, seed }).map_err(to_py_err)?;
    let mut out = String::from(FLOW_CSV_HEADER);
    out.push('\n');
    for flow in &sampled {
        out.push_str(&flow.to_csv_line());
        out.push('\n');
    }
    std::fs::write(output_csv, out)
        .map_err(|e| PyValueError::new_err(format!("{output_csv}: {e}")))?;
    Ok(sampled.len())
}

/// A detection dictionary: per-rule monitored domains and dated endpoints.
#[pyclass]
struct Dictionary {
    inner: IoTDictionary,
}

#[pymethods]
impl Dictionary {
    /// Load and validate a dictionary JSON file produced by `build-dict`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = IoTDictionary::from_file(Path::new(path)).map_err(to_py_err)?;
        Ok(Dictionary { inner })
    }

    /// All rule labels, sorted.
    fn labels(&self) -> Vec<String> {
        self.inner.rules.keys().cloned().collect()
    }

    /// The study window as (start, end) ISO dates, inclusive.
    fn window(&self) -> (String, String) {
        (
            self.inner.window.start.to_string(),
            self.inner.window.end.to_string(),
        )
    }

    /// Structure of one rule: level, parent, domains, and the number of
    /// monitored domains.
    fn rule(&self, py: Python<'_>, label: &str) -> PyResult<Py<PyAny>> {
        let rule = self
            .inner
            .rules
            .get(label)
            .ok_or_else(|| PyValueError::new_err(format!("no rule `{label}`")))?;
        let value = serde_json::json!({
            "label": rule.label,
            "level": rule.level.to_string(),
            "parent": rule.parent,
            "primary_domains": rule.primary_domains,
            "support_domains": rule.support_domains,
            "monitored_count": rule.monitored_count(),
            "default_threshold": rule.default_threshold,
        });
        json_to_py(py, &value)
    }

    /// Domains a subscriber must contact for `label` to fire at evidence
    /// fraction `d` (or the rule's own default when `d` is None).
    #[pyo3(signature = (label, d=None))]
    fn required_count(&self, label: &str, d: Option<f64>) -> PyResult<usize> {
        let rule = self
            .inner
            .rules
            .get(label)
            .ok_or_else(|| PyValueError::new_err(format!("no rule `{label}`")))?;
        iotscope::dictionary::required_domain_count(
            rule.monitored_count(),
            d.unwrap_or(rule.default_threshold),
        )
        .map_err(to_py_err)
    }

    /// Run detection over flow CSV files and return the events as dicts.
    ///
    /// `subscriber_ranges` names the CIDR blocks assigned to subscriber
    /// lines; flows whose addresses match no range are ignored, so there is
    /// no silent default.
    #[pyo3(signature = (flow_paths, salt, subscriber_ranges, threshold=None, bin="hour"))]
    fn detect(
        &self,
        py: Python<'_>,
        flow_paths: Vec<PathBuf>,
        salt: &str,
        subscriber_ranges: Vec<String>,
        threshold: Option<f64>,
        bin: &str,
    ) -> PyResult<Py<PyAny>> {
        let mut cfg = DetectorConfig::default();
        cfg.salt = salt.as_bytes().to_vec();
        cfg.threshold = threshold;
        cfg.bin = bin
            .parse()
            .map_err(|_| PyValueError::new_err(format!("`{bin}` is not `hour` or `day`")))?;
        cfg.roles.subscriber_ranges = subscriber_ranges
            .iter()
            .map(|r| r.parse().map_err(to_py_err))
            .collect::<PyResult<Vec<_>>>()?;

        let mut flows = Vec::new();
        for path in &flow_paths {
            let file = std::fs::File::open(path)
                .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
            let (mut records, _skipped) = FlowReader::new(
                std::io::BufReader::new(file),
                &path.to_string_lossy(),
                false,
            )
            .read_all()
            .map_err(to_py_err)?;
            flows.append(&mut records);
        }

        let run = run_detection(&flows, &self.inner, &cfg).map_err(to_py_err)?;
        let value = serde_json::to_value(&run.events)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &value)
    }

    /// The dictionary serialized back to its JSON exchange form.
    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    fn __len__(&self) -> usize {
        self.inner.rules.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dictionary({} rules, {}..{})",
            self.inner.rules.len(),
            self.inner.window.start,
            self.inner.window.end
        )
    }
}

/// Detect consumer IoT devices in sampled flow data via domain signatures.
#[pymodule]
fn iotscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dictionary>()?;
    m.add_function(wrap_pyfunction!(required_domain_count, m)?)?;
    m.add_function(wrap_pyfunction!(visibility_probability, m)?)?;
    m.add_function(wrap_pyfunction!(anonymize_subscriber, m)?)?;
    m.add_function(wrap_pyfunction!(classify_infra, m)?)?;
    m.add_function(wrap_pyfunction!(sample_flows, m)?)?;
    Ok(())
}
