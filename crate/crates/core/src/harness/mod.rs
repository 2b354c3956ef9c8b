//! Trace formats, the synthetic workload generator and report output.

pub mod gen;
pub mod report;
pub mod trace;

pub use gen::{gen_traces, GenParams};
pub use report::{read_report, summary_row, write_events, write_report, write_summary, SummaryRow};
pub use trace::{
    parse_job_trace, parse_job_trace_str, parse_loan_plan, parse_loan_plan_str, parse_util_trace,
    parse_util_trace_str, write_job_trace, write_util_trace, UtilPoint, UtilTrace, UTIL_INTERVAL_S,
};
