//! Exit codes and the machine-readable error record.

use fedsim_core::Error;

/// `(kind, code)` for every error the core can return.
pub const CODES: [(&str, i32); 18] = [
    ("config", 3),
    ("io", 4),
    ("json", 5),
    ("schema_mismatch", 6),
    ("malformed_row", 7),
    ("infeasible_sizes", 8),
    ("all_clients_diverged", 9),
    ("non_finite_loss", 10),
    ("shape_mismatch", 11),
    ("key_mismatch", 12),
    ("weight_sum_violation", 13),
    ("missing_dyn_memory", 14),
    ("uninitialized_opt_state", 15),
    ("degenerate_batch", 16),
    ("stale_cache", 17),
    ("single_class", 18),
    ("empty_sample", 19),
    ("checkpoint", 20),
];

pub fn code_for(kind: &str) -> i32 {
    CODES
        .iter()
        .find(|(k, _)| *k == kind)
        .map_or(1, |&(_, c)| c)
}

pub fn help_table() -> String {
    let mut s =
        String::from("Exit codes:\n  0  success\n  1  unexpected failure\n  2  usage error\n");
    for (kind, code) in CODES {
        s.push_str(&format!("  {code:<2} {kind}\n"));
    }
    s.push_str("\nOn failure a JSON record {\"error\", \"exit_code\", \"message\", \"field\"?} is written to stderr.\n");
    s.push_str("FEDSIM_THREADS sets the worker thread count (default: all cores).");
    s
}

pub fn record(err: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({
        "error": err.kind(),
        "exit_code": code_for(err.kind()),
        "message": err.to_string(),
    });
    if let Error::Config { field, .. } = err {
        v["field"] = serde_json::Value::String(field.clone());
    }
    v
}
