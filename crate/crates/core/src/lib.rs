//! Deterministic agent-based simulator of a mutual-assistance community.
//!
//! A bounded grid of cells holds professional carers, informal carers,
//! neutral bystanders, and requesters whose assistance requests are matched
//! by a priority dispatcher (alarms before activity participation before
//! non-urgent help). Population churn replaces cells over time, requests
//! expire into failures when no carer arrives, and would-be participants
//! fall back to ordinary help when no activity forms in time.
//!
//! [`model`] holds the domain types and their invariants, [`dispatch`] the
//! matching rules, [`engine`] the step loop, and [`harness`] the experiment
//! plumbing (config files, CSV output, parameter sweeps).

pub mod dispatch;
pub mod engine;
pub mod harness;
pub mod model;

pub use dispatch::{
    check_time_constraint, join_or_initiate, parse_request, parse_request_traced, priority_order,
    select_informal_carer, select_professional_carer, DispatchOutcome, Predicate, TimeCheck,
};
pub use engine::{init_grid, latency_metric, run, RngStream, Simulation, StepReport};
pub use harness::{
    aggregate_by_p_d, coupled_params, emit_plot_data, format_summary, load_config, parse_config,
    run_sweep, snapshot_csv, sweep_csv, write_config, write_snapshot_csv, HarnessError,
    PdAggregate, SweepRow, SweepSpec, SNAPSHOT_HEADER, SWEEP_HEADER,
};
pub use model::{
    check_consistency, deadline_for, new_grid, role_census, Activity, ActivityId, ActivitySet,
    ActivityState, ActivityTag, Cell, CellId, Engagement, Grid, MeanCensus, MeanCount, Request,
    RequestBook, RequestKind, RequestState, Role, RoleCensus, RoleCount, RunSummary, SimParams,
    Snapshot, ValidationError,
};
