//! Python bindings for `cpl-core`.
//!
//! Structured results (run metrics, tree nodes, pairs) cross the boundary
//! as plain dicts and lists built from their JSON form.

use std::path::PathBuf;

use cpl_core::config::{RunConfig, Variant};
use cpl_core::env::{check_answer, oracle_distance, EnvState, Op, Prompt};
use cpl_core::error::Error;
use cpl_core::mcts::{run_search, ucb_score as core_ucb, SearchTree, UcbVariant};
use cpl_core::orchestrator::{self, Prepared, SweepPoint};
use cpl_core::pairs::{extract_tree_pairs, BufferMode};
use cpl_core::policy::{LinearSoftmaxPolicy, Policy};
use cpl_core::value::ValueModel;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(cpl_py, CplError, PyException, "Error raised by the core library.");

fn to_py(err: Error) -> PyErr {
    match err {
        Error::MissingInput(path) => PyFileNotFoundError::new_err(path.display().to_string()),
        e @ (Error::InvalidInput(_) | Error::Config { .. } | Error::ActionOutOfRange { .. } | Error::TerminalState { .. }) => {
            PyValueError::new_err(e.to_string())
        }
        e => CplError::new_err(e.to_string()),
    }
}

/// Converts anything serializable into native Python objects.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| CplError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// One reach-target puzzle.
#[pyclass(name = "Prompt", frozen, from_py_object)]
#[derive(Clone)]
struct PyPrompt {
    inner: Prompt,
}

#[pymethods]
impl PyPrompt {
    #[new]
    #[pyo3(signature = (id, start, target, budget = 4, ops = None))]
    fn new(id: u64, start: i64, target: i64, budget: u32, ops: Option<Vec<String>>) -> PyResult<Self> {
        let ops = match ops {
            Some(list) => list.iter().map(|s| parse::<Op>(s)).collect::<PyResult<Vec<_>>>()?,
            None => cpl_core::env::default_op_vocab(),
        };
        Ok(PyPrompt {
            inner: Prompt::new(id, start, target, budget, ops).map_err(to_py)?,
        })
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn start(&self) -> i64 {
        self.inner.start
    }

    #[getter]
    fn target(&self) -> i64 {
        self.inner.target
    }

    #[getter]
    fn budget(&self) -> u32 {
        self.inner.budget
    }

    #[getter]
    fn ops(&self) -> Vec<String> {
        self.inner.op_vocab.iter().map(ToString::to_string).collect()
    }

    /// Whether `steps` (op indices) end on the target.
    fn check_answer(&self, steps: Vec<usize>) -> PyResult<bool> {
        Ok(check_answer(&self.inner, &steps).map_err(to_py)?.correct)
    }

    /// Fewest steps to the target from `current` after `steps_taken` steps,
    /// or None when it is out of reach.
    #[pyo3(signature = (current = None, steps_taken = 0))]
    fn oracle_distance(&self, current: Option<i64>, steps_taken: u32) -> Option<u32> {
        let state = EnvState {
            prompt_id: self.inner.id,
            current: current.unwrap_or(self.inner.start),
            steps_taken,
        };
        oracle_distance(&self.inner, &state)
    }

    fn __repr__(&self) -> String {
        format!(
            "Prompt(id={}, start={}, target={}, budget={})",
            self.inner.id, self.inner.start, self.inner.target, self.inner.budget
        )
    }
}

/// Run configuration; mirrors the TOML file accepted by the `cpl` binary.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::from_toml(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| to_py(e.into()))?;
        Self::new(Some(&text))
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.run.seed = seed;
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.run.variant.as_str()
    }

    #[setter]
    fn set_variant(&mut self, variant: &str) -> PyResult<()> {
        self.inner.run.variant = parse(variant)?;
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.run.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.run.epochs = epochs;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.pairs.tau
    }

    #[setter]
    fn set_tau(&mut self, tau: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.pairs.tau = tau;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.cpl.alpha
    }

    #[setter]
    fn set_alpha(&mut self, alpha: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.cpl.alpha = alpha;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    /// Shrinks prompt counts and search budget, mostly for quick experiments.
    fn scaled(&self, num_train_prompts: usize, num_eval_prompts: usize, num_simulations: usize) -> PyResult<Self> {
        let mut next = self.inner.clone();
        next.run.num_train_prompts = num_train_prompts;
        next.run.num_eval_prompts = num_eval_prompts;
        next.mcts.num_simulations = num_simulations;
        next.validate().map_err(to_py)?;
        Ok(PyConfig { inner: next })
    }
}

/// Linear-softmax step policy.
#[pyclass(name = "Policy", frozen, from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: LinearSoftmaxPolicy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab_size = 5))]
    fn uniform(vocab_size: usize) -> Self {
        PyPolicy {
            inner: LinearSoftmaxPolicy::uniform(vocab_size),
        }
    }

    /// Loads a `policy.json` written by a run.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let params = cpl_core::artifacts::read_params(&path).map_err(to_py)?;
        Ok(PyPolicy {
            inner: LinearSoftmaxPolicy::new(params).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cpl_core::artifacts::write_params(&path, self.inner.params()).map_err(to_py)
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.params().checksum()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.params().theta.clone()
    }

    /// Op probabilities at the state reached by `steps`.
    #[pyo3(signature = (prompt, steps = Vec::new()))]
    fn distribution(&self, prompt: &PyPrompt, steps: Vec<usize>) -> PyResult<Vec<f64>> {
        let states = cpl_core::env::replay(&prompt.inner, &steps).map_err(to_py)?;
        let state = states.last().expect("replay includes the start state");
        Ok(self.inner.checked_distribution(&prompt.inner, state).map_err(to_py)?.probs)
    }

    fn trajectory_logprob(&self, prompt: &PyPrompt, steps: Vec<usize>) -> PyResult<f64> {
        self.inner.trajectory_logprob(&prompt.inner, &steps).map_err(to_py)
    }

    fn greedy_decode(&self, prompt: &PyPrompt) -> PyResult<Vec<usize>> {
        self.inner.greedy_decode(&prompt.inner).map_err(to_py)
    }

    /// Greedy accuracy over a list of prompts.
    fn accuracy(&self, py: Python<'_>, prompts: Vec<PyPrompt>) -> PyResult<f64> {
        let prompts: Vec<Prompt> = prompts.into_iter().map(|p| p.inner).collect();
        py.detach(|| orchestrator::evaluate_policy(&self.inner, &prompts)).map_err(to_py)
    }
}

/// A finished search tree.
#[pyclass(name = "Tree", frozen)]
struct PyTree {
    inner: SearchTree,
}

#[pymethods]
impl PyTree {
    #[getter]
    fn prompt_id(&self) -> u64 {
        self.inner.prompt_id
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }

    #[getter]
    fn root_visits(&self) -> u64 {
        self.inner.root().n
    }

    /// Node records as dicts, in id order.
    fn nodes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.to_records().1)
    }

    /// Op indices of the best complete trajectory, or None.
    fn best_trajectory(&self) -> Option<Vec<usize>> {
        self.inner.best_trajectory().ok().map(|t| t.steps)
    }

    /// Preference pairs of this tree as dicts.
    #[pyo3(signature = (tau = 0.3, mode = "both"))]
    fn pairs<'py>(&self, py: Python<'py>, tau: f64, mode: &str) -> PyResult<Bound<'py, PyAny>> {
        let mode = match mode {
            "both" => BufferMode::Both,
            "complete_only" => BufferMode::CompleteOnly,
            "depthwise" => BufferMode::Depthwise,
            other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
        };
        if !(tau > 0.0) {
            return Err(PyValueError::new_err("tau must be > 0"));
        }
        let records: Vec<_> = extract_tree_pairs(&self.inner, tau, mode).iter().map(|p| p.to_record()).collect();
        to_object(py, &records)
    }
}

/// Searches one prompt with the configured budget and value model.
#[pyfunction]
#[pyo3(signature = (prompt, config, policy = None))]
fn search(py: Python<'_>, prompt: &PyPrompt, config: &PyConfig, policy: Option<&PyPolicy>) -> PyResult<PyTree> {
    let policy = policy.map_or_else(|| LinearSoftmaxPolicy::uniform(prompt.inner.vocab_size()), |p| p.inner.clone());
    let cfg = &config.inner;
    let tree = py
        .detach(|| {
            let value = ValueModel::new(cfg.value_config())?;
            run_search(&prompt.inner, &policy, &value, &cfg.mcts_config(prompt.inner.id))
        })
        .map_err(to_py)?;
    Ok(PyTree { inner: tree })
}

/// Train and eval prompt lists for a configuration.
#[pyfunction]
fn synthesize(config: &PyConfig) -> PyResult<(Vec<PyPrompt>, Vec<PyPrompt>)> {
    let (train, eval) = orchestrator::synthesize_split(&config.inner).map_err(to_py)?;
    let wrap = |v: Vec<Prompt>| v.into_iter().map(|inner| PyPrompt { inner }).collect();
    Ok((wrap(train), wrap(eval)))
}

/// Shared stages (prompts, search, fine-tuning) of one master seed; every
/// variant run from it sees the same inputs.
#[pyclass(name = "Experiment", frozen)]
struct PyExperiment {
    config: RunConfig,
    prepared: Prepared,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let config = config.inner.clone();
        let prepared = py.detach(|| orchestrator::prepare(&config)).map_err(to_py)?;
        Ok(PyExperiment { config, prepared })
    }

    #[getter]
    fn base_accuracy(&self) -> f64 {
        self.prepared.base_accuracy
    }

    #[getter]
    fn sft_accuracy(&self) -> f64 {
        self.prepared.sft_accuracy
    }

    #[getter]
    fn sft_policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.prepared.sft_policy.clone(),
        }
    }

    #[getter]
    fn eval_prompts(&self) -> Vec<PyPrompt> {
        self.prepared.eval_prompts.iter().cloned().map(|inner| PyPrompt { inner }).collect()
    }

    #[getter]
    fn digests<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.prepared.digests)
    }

    /// Runs one variant; returns `(result dict, trained policy)`.
    #[pyo3(signature = (variant = None))]
    fn run<'py>(&self, py: Python<'py>, variant: Option<&str>) -> PyResult<(Bound<'py, PyAny>, PyPolicy)> {
        let variant = match variant {
            Some(v) => parse::<Variant>(v)?,
            None => self.config.run.variant,
        };
        let run = py
            .detach(|| orchestrator::run_variant(&self.config, &self.prepared, variant))
            .map_err(to_py)?;
        Ok((to_object(py, &run.result)?, PyPolicy { inner: run.policy }))
    }

    /// Curriculum runs over the standard balance-rate sweep, as
    /// `[(label, result dict), ...]`.
    fn sweep<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let results = py
            .detach(|| orchestrator::alpha_sweep(&self.config, &self.prepared, &SweepPoint::standard()))
            .map_err(to_py)?;
        to_object(py, &results)
    }
}

/// Selection score of a child node.
#[pyfunction]
#[pyo3(signature = (w, n, parent_visits, c_explore = 1.0, variant = "log_ratio"))]
fn ucb_score(w: f64, n: u64, parent_visits: u64, c_explore: f64, variant: &str) -> PyResult<f64> {
    let variant = match variant {
        "log_ratio" => UcbVariant::LogRatio,
        "uct" => UcbVariant::Uct,
        other => return Err(PyValueError::new_err(format!("unknown UCB variant `{other}`"))),
    };
    Ok(core_ucb(w, n, parent_visits, c_explore, variant))
}

#[pyfunction]
fn minmax_normalize(values: Vec<f64>) -> Vec<f64> {
    cpl_core::cpl::minmax_normalize(&values)
}

/// Runs the command-line interface with `args` (without the program name).
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> PyResult<()> {
    let argv: Vec<String> = std::iter::once("cpl".to_string()).chain(args).collect();
    py.detach(|| cpl_core::cli::run_args(argv)).map_err(to_py)
}

#[pymodule]
fn cpl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CplError", m.py().get_type::<CplError>())?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(ucb_score, m)?)?;
    m.add_function(wrap_pyfunction!(minmax_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
