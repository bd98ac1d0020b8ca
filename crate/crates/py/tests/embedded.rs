use pyo3::prelude::*;
use pyo3::types::PyDict;

use patientsim_py::patientsim_py;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>) -> R) -> R {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(patientsim_py);
        Python::initialize();
    });
    Python::attach(|py| {
        let m = py.import("patientsim_py").unwrap();
        f(py, &m)
    })
}

#[test]
fn module_exposes_constants_and_helpers() {
    with_module(|_, m| {
        assert_eq!(m.getattr("N_FEATURES").unwrap().extract::<usize>().unwrap(), 46);
        let code: usize = m.call_method1("action_code", (4, 4)).unwrap().extract().unwrap();
        assert_eq!(code, 24);
        assert!(m.call_method1("action_code", (5, 0)).is_err());
    });
}

#[test]
fn cohort_round_trip_through_python() {
    with_module(|py, m| {
        let locals = PyDict::new(py);
        locals.set_item("ps", m).unwrap();
        py.run(
            c"c = ps.Cohort.synthetic(12, seed=3)\ntrain, val = c.split(0.5, seed=1)\nn = (len(c), len(train) + len(val), len(c.states(0)[0]))",
            None,
            Some(&locals),
        )
        .unwrap();
        let n: (usize, usize, usize) = locals.get_item("n").unwrap().unwrap().extract().unwrap();
        assert_eq!(n, (12, 12, 46));
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py, m| {
        let err = m.getattr("Cohort").unwrap().call_method1("load", ("/nonexistent/cohort.csv",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyIOError>(py));
        let err = m.call_method1("decode_action", (25,)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
