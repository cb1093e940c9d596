//! Discrete-time engine: seeded random stream, grid initialisation, the
//! per-step phase loop, and the run driver with census snapshots.
//!
//! Each step applies, in order: population churn, countdown of running
//! interactions, deadline expiry, participant time-constraint checks, and
//! prioritized dispatch of pending requests. Waiting times age implicitly
//! with the step counter. All randomness flows through one [`RngStream`],
//! so a (seed, parameter) pair fully determines a run on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{self, DispatchOutcome, TimeCheck};
use crate::model::{
    check_consistency, new_grid, role_census, ActivityId, ActivitySet, ActivityState, CellId,
    Engagement, Grid, Request, RequestBook, RequestKind, RequestState, Role, RunSummary,
    SimParams, Snapshot, ValidationError,
};

/// Deterministic random stream backing a run. ChaCha with 8 rounds: stable
/// across platforms and rustc versions, cheap to fork for parallel sweeps.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
}

impl RngStream {
    /// Identifier of the generator backing the stream.
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        RngStream { rng: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// Everything that happened during one step, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub step: u64,
    /// Cells re-rolled by churn: (cell, old role, new role).
    pub churned: Vec<(CellId, Role, Role)>,
    /// Fall-through events followed by the dispatch outcomes, each pending
    /// request handled once, in queue order.
    pub dispatched: Vec<(CellId, DispatchOutcome)>,
    /// Requesters whose request expired this step.
    pub aborted: Vec<CellId>,
    /// Serving pairs and activities that completed this step.
    pub completed_interactions: u64,
}

/// One running simulation: the grid and its live requests and activities,
/// the step counter, the cumulative failure count, and the random stream.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: SimParams,
    grid: Grid,
    activities: ActivitySet,
    requests: RequestBook,
    rng: RngStream,
    now: u64,
    failures: u64,
}

impl Simulation {
    /// Validate the parameters and draw the initial population.
    pub fn new(params: SimParams) -> Result<Simulation, ValidationError> {
        params.validate()?;
        let mut rng = RngStream::new(params.seed);
        let (grid, requests) = init_grid(&params, &mut rng)?;
        Ok(Simulation {
            params,
            grid,
            activities: ActivitySet::new(),
            requests,
            rng,
            now: 0,
            failures: 0,
        })
    }

    /// Start from a hand-built state instead of a random population. The
    /// state must match the parameters and pass the consistency check.
    pub fn from_state(
        params: SimParams,
        grid: Grid,
        activities: ActivitySet,
        requests: RequestBook,
    ) -> Result<Simulation, ValidationError> {
        params.validate()?;
        let mut violations = Vec::new();
        if grid.width() != params.grid_w || grid.height() != params.grid_h {
            violations.push(format!(
                "grid is {}x{} but params say {}x{}",
                grid.width(),
                grid.height(),
                params.grid_w,
                params.grid_h
            ));
        }
        if let Err(more) = check_consistency(&grid, &activities, &requests, &params) {
            violations.extend(more);
        }
        if !violations.is_empty() {
            return Err(ValidationError::new(violations));
        }
        let rng = RngStream::new(params.seed);
        Ok(Simulation { params, grid, activities, requests, rng, now: 0, failures: 0 })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn activities(&self) -> &ActivitySet {
        &self.activities
    }

    pub fn requests(&self) -> &RequestBook {
        &self.requests
    }

    /// Step counter; 0 until the first step runs.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Requests aborted so far.
    pub fn failures(&self) -> u64 {
        self.failures
    }

    /// Mean waiting time of currently waiting requesters.
    pub fn latency(&self) -> f64 {
        latency_metric(&self.grid, self.now)
    }

    /// Census of the current instant.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            step: self.now,
            census: role_census(&self.grid),
            failures_cum: self.failures,
            mean_wait: self.latency(),
        }
    }

    /// Advance the simulation by one step.
    pub fn step(&mut self) -> StepReport {
        self.now += 1;
        let churned = self.churn_step();
        let mut completed = self.advance_interactions();
        let aborted = self.expire_deadlines();
        let mut dispatched = self.fall_through_checks();
        completed += self.dispatch_pending(&mut dispatched);

        #[cfg(debug_assertions)]
        if let Err(violations) =
            check_consistency(&self.grid, &self.activities, &self.requests, &self.params)
        {
            panic!("inconsistent state after step {}: {}", self.now, violations.join("; "));
        }

        StepReport {
            step: self.now,
            churned,
            dispatched,
            aborted,
            completed_interactions: completed,
        }
    }

    /// Re-roll up to `churn_count` cells. Professional carers and actively
    /// interacting cells never churn; waiting requesters do, and a re-rolled
    /// requester's pending request is cancelled silently.
    fn churn_step(&mut self) -> Vec<(CellId, Role, Role)> {
        if self.params.churn_count == 0 {
            return Vec::new();
        }
        let eligible: Vec<CellId> = self
            .grid
            .iter()
            .filter(|(_, c)| {
                c.role != Role::ProfessionalCarer && !c.engagement.is_interacting()
            })
            .map(|(id, _)| id)
            .collect();
        let count = (self.params.churn_count as usize).min(eligible.len());
        if count == 0 {
            return Vec::new();
        }
        let mut chosen: Vec<CellId> = rand::seq::index::sample(&mut self.rng, eligible.len(), count)
            .iter()
            .map(|i| eligible[i])
            .collect();
        chosen.sort();

        let mut events = Vec::with_capacity(count);
        for id in chosen {
            let old_role = self.grid.cell(id).role;
            // cancel a pending request without counting a failure
            if let Some(req) = self.requests.remove(id) {
                if let RequestState::InForming(a) = req.state {
                    leave_forming(&mut self.activities, a, id);
                }
            }
            let u: f64 = self.rng.random();
            let new_role = if u < self.params.ic_d {
                let cell = self.grid.cell_mut(id);
                cell.role = Role::InformalCarer;
                cell.engagement = Engagement::Idle;
                Role::InformalCarer
            } else if u < self.params.ic_d + self.params.n_d {
                let cell = self.grid.cell_mut(id);
                cell.role = Role::Neutral;
                cell.engagement = Engagement::Idle;
                Role::Neutral
            } else {
                let kind =
                    draw_request_kind(&mut self.rng, &self.params, self.params.a_d, self.params.p_d);
                place_requester(
                    &mut self.grid,
                    &mut self.requests,
                    &self.params,
                    &mut self.rng,
                    id,
                    kind,
                    self.now,
                );
                Role::Requester(kind)
            };
            events.push((id, old_role, new_role));
        }
        events
    }

    /// Count running interactions down by one; at zero the pair or activity
    /// dissolves and every served requester returns to neutral.
    fn advance_interactions(&mut self) -> u64 {
        let mut completed = 0;

        let pairs: Vec<(CellId, CellId, u64)> = self
            .grid
            .iter()
            .filter_map(|(id, c)| match c.engagement {
                Engagement::Serving { target, remaining } => Some((id, target, remaining)),
                _ => None,
            })
            .collect();
        for (carer, target, remaining) in pairs {
            let left = remaining - 1;
            if left == 0 {
                self.grid.cell_mut(carer).engagement = Engagement::Idle;
                dispatch::complete_requester(&mut self.grid, &mut self.requests, target);
                completed += 1;
            } else {
                self.grid.cell_mut(carer).engagement =
                    Engagement::Serving { target, remaining: left };
                self.grid.cell_mut(target).engagement =
                    Engagement::BeingServed { carer, remaining: left };
            }
        }

        let running: Vec<(ActivityId, u64)> = self
            .activities
            .iter()
            .filter_map(|a| match a.state {
                ActivityState::Ongoing { remaining } => Some((a.id, remaining)),
                _ => None,
            })
            .collect();
        for (id, remaining) in running {
            let left = remaining - 1;
            if left == 0 {
                dispatch::finish_activity(
                    &mut self.grid,
                    &mut self.activities,
                    &mut self.requests,
                    id,
                );
                completed += 1;
            } else {
                self.activities.get_mut(id).unwrap().state =
                    ActivityState::Ongoing { remaining: left };
            }
        }

        completed
    }

    /// Abort every waiting request whose deadline has arrived. Each abort
    /// counts one failure and returns the requester to neutral.
    fn expire_deadlines(&mut self) -> Vec<CellId> {
        let expired: Vec<CellId> = self
            .requests
            .iter()
            .filter(|r| r.is_waiting() && self.now >= r.deadline)
            .map(|r| r.owner)
            .collect();
        let mut aborted = Vec::with_capacity(expired.len());
        for owner in expired {
            let mut req = self.requests.remove(owner).unwrap();
            if let RequestState::InForming(a) = req.state {
                leave_forming(&mut self.activities, a, owner);
            }
            req.state = RequestState::Aborted;
            self.failures += 1;
            let cell = self.grid.cell_mut(owner);
            cell.role = Role::Neutral;
            cell.engagement = Engagement::Idle;
            aborted.push(owner);
        }
        aborted
    }

    /// Apply the time-constraint check to every forming-activity member.
    /// Requests past the window leave their activity and re-enter the queue
    /// as non-urgent, keeping their original creation time.
    fn fall_through_checks(&mut self) -> Vec<(CellId, DispatchOutcome)> {
        let informing: Vec<CellId> = self
            .requests
            .iter()
            .filter(|r| matches!(r.state, RequestState::InForming(_)))
            .map(|r| r.owner)
            .collect();
        let mut events = Vec::new();
        for owner in informing {
            let req = *self.requests.get(owner).unwrap();
            if dispatch::check_time_constraint(&req, &self.params, self.now)
                == TimeCheck::FallThroughToNonUrgent
            {
                let RequestState::InForming(a) = req.state else { unreachable!() };
                leave_forming(&mut self.activities, a, owner);
                let req = self.requests.get_mut(owner).unwrap();
                req.state = RequestState::WaitingMatch;
                req.fell_through = true;
                events.push((owner, DispatchOutcome::FallThroughToNonUrgent));
            }
        }
        events
    }

    /// Parse every pending request in priority order. Returns the number of
    /// interactions that completed on the spot (zero-duration matches).
    fn dispatch_pending(&mut self, dispatched: &mut Vec<(CellId, DispatchOutcome)>) -> u64 {
        let pending: Vec<Request> =
            self.requests.iter().filter(|r| r.is_pending()).copied().collect();
        let ordered = dispatch::priority_order(pending);
        let mut completed = 0;
        for req in ordered {
            let outcome = dispatch::parse_request(
                req.owner,
                &mut self.grid,
                &mut self.activities,
                &mut self.requests,
                &self.params,
                &mut self.rng,
                self.now,
            );
            match outcome {
                DispatchOutcome::ServedByPC(_) | DispatchOutcome::ServedByIC(_)
                    if self.params.service_duration == 0 =>
                {
                    completed += 1
                }
                DispatchOutcome::JoinedActivity(a) | DispatchOutcome::InitiatedActivity(a)
                    if self.activities.get(a).is_none() =>
                {
                    // zero-duration activity started and finished on the spot
                    completed += 1
                }
                _ => {}
            }
            dispatched.push((req.owner, outcome));
        }
        completed
    }
}

/// Remove a member from a forming activity, dissolving the activity when it
/// loses its last member.
fn leave_forming(activities: &mut ActivitySet, id: ActivityId, member: CellId) {
    if let Some(act) = activities.get_mut(id) {
        act.members.remove(&member);
        if act.members.is_empty() {
            activities.remove(id);
        }
    }
}

fn draw_request_kind(
    rng: &mut RngStream,
    params: &SimParams,
    alarm_rate: f64,
    participant_rate: f64,
) -> RequestKind {
    let v: f64 = rng.random();
    if v < alarm_rate {
        RequestKind::Alarm
    } else if v < alarm_rate + participant_rate {
        let tag = if params.activity_types > 1 {
            rng.random_range(0..params.activity_types)
        } else {
            0
        };
        RequestKind::Participant(tag)
    } else {
        RequestKind::NonUrgent
    }
}

/// Turn a cell into a requester with a fresh request created now.
fn place_requester(
    grid: &mut Grid,
    requests: &mut RequestBook,
    params: &SimParams,
    rng: &mut RngStream,
    id: CellId,
    kind: RequestKind,
    now: u64,
) {
    let prefers_informal = rng.random_bool(params.pref_informal);
    let cell = grid.cell_mut(id);
    cell.role = Role::Requester(kind);
    cell.engagement = Engagement::Waiting { since: now };
    requests.insert(Request::new(id, kind, now, params, prefers_informal));
}

/// Draw the initial population: every cell independently gets a role from
/// the configured mix; requesters start waiting with a request created at
/// step 0.
pub fn init_grid(
    params: &SimParams,
    rng: &mut RngStream,
) -> Result<(Grid, RequestBook), ValidationError> {
    let mut grid = new_grid(params)?;
    let mut requests = RequestBook::new();
    let ids: Vec<CellId> = grid.ids().collect();
    for id in ids {
        let u: f64 = rng.random();
        if u < params.pc_rate {
            grid.cell_mut(id).role = Role::ProfessionalCarer;
        } else if u < params.pc_rate + params.ic_rate {
            grid.cell_mut(id).role = Role::InformalCarer;
        } else if u < params.pc_rate + params.ic_rate + params.r_rate {
            let kind = draw_request_kind(rng, params, params.a_rate, params.p_rate);
            place_requester(&mut grid, &mut requests, params, rng, id, kind, 0);
        } else {
            grid.cell_mut(id).role = Role::Neutral;
        }
    }
    Ok((grid, requests))
}

/// Mean waiting time, in steps, over requesters that are currently waiting
/// (unmatched or in a forming activity). Zero when none are waiting.
pub fn latency_metric(grid: &Grid, now: u64) -> f64 {
    let mut sum = 0u64;
    let mut count = 0u64;
    for (_, cell) in grid.iter() {
        if let Engagement::Waiting { since } = cell.engagement {
            sum += now - since;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}

/// Run a full simulation, recording a census snapshot every `record_every`
/// steps. Returns the component-wise snapshot average together with the
/// snapshots themselves.
pub fn run(params: &SimParams) -> Result<(RunSummary, Vec<Snapshot>), ValidationError> {
    let mut sim = Simulation::new(params.clone())?;
    let expected = (params.steps / params.record_every.max(1)) as usize;
    let mut snapshots = Vec::with_capacity(expected);
    for _ in 0..params.steps {
        sim.step();
        if sim.now() % params.record_every == 0 {
            snapshots.push(sim.snapshot());
        }
    }
    Ok((RunSummary::from_snapshots(&snapshots), snapshots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cell, RoleCensus};

    fn cid(row: u32, col: u32) -> CellId {
        CellId::new(row, col)
    }

    /// Parameters for scripted scenarios: nothing random happens unless the
    /// test asks for it.
    fn scripted(grid_w: u32, grid_h: u32) -> SimParams {
        SimParams { grid_w, grid_h, churn_count: 0, ..SimParams::default() }
    }

    fn place(grid: &mut Grid, id: CellId, role: Role) {
        grid.cell_mut(id).role = role;
    }

    fn place_waiting_requester(
        grid: &mut Grid,
        requests: &mut RequestBook,
        id: CellId,
        kind: RequestKind,
        params: &SimParams,
        prefers_informal: bool,
    ) {
        let cell = grid.cell_mut(id);
        cell.role = Role::Requester(kind);
        cell.engagement = Engagement::Waiting { since: 0 };
        requests.insert(Request::new(id, kind, 0, params, prefers_informal));
    }

    #[test]
    fn rng_stream_is_reproducible() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let xs: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.seed(), 42);
        assert_eq!(RngStream::ALGORITHM, "chacha8");
        let mut c = RngStream::new(43);
        assert_ne!(xs[0], c.next_u64());
    }

    #[test]
    fn init_with_full_neutral_rate_spawns_nobody() {
        let params = SimParams {
            pc_rate: 0.0,
            ic_rate: 0.0,
            r_rate: 0.0,
            n_rate: 1.0,
            grid_w: 4,
            grid_h: 3,
            ..SimParams::default()
        };
        let mut rng = RngStream::new(7);
        let (grid, requests) = init_grid(&params, &mut rng).unwrap();
        assert!(grid.iter().all(|(_, c)| *c == Cell::neutral()));
        assert!(requests.is_empty());
    }

    #[test]
    fn init_requesters_wait_from_step_zero_with_kind_deadlines() {
        let params = SimParams {
            pc_rate: 0.0,
            ic_rate: 0.0,
            r_rate: 1.0,
            n_rate: 0.0,
            grid_w: 4,
            grid_h: 4,
            ..SimParams::default()
        };
        let mut rng = RngStream::new(11);
        let (grid, requests) = init_grid(&params, &mut rng).unwrap();
        assert_eq!(requests.len(), 16);
        for (id, cell) in grid.iter() {
            assert_eq!(cell.engagement, Engagement::Waiting { since: 0 });
            let req = requests.get(id).unwrap();
            assert_eq!(req.created, 0);
            let horizon = match req.kind {
                RequestKind::Alarm => params.deadline_alarm,
                RequestKind::Participant(_) => {
                    params.participant_wait_window + params.deadline_nonurgent
                }
                RequestKind::NonUrgent => params.deadline_nonurgent,
            };
            assert_eq!(req.deadline, horizon);
        }
    }

    #[test]
    fn init_role_frequencies_match_the_mix() {
        // sample mean of each role count over many seeded grids, compared
        // to the multinomial expectation within three standard errors
        let params = SimParams::default(); // 15x15, mix .1/.25/.25/.4
        let seeds = 1000u64;
        let cells = params.cell_count() as f64;
        let mut totals = [0u64; 4]; // pc, ic, requester, neutral
        for seed in 0..seeds {
            let mut rng = RngStream::new(seed);
            let (grid, _) = init_grid(&params, &mut rng).unwrap();
            let census = role_census(&grid);
            totals[0] += census.pc.total as u64;
            totals[1] += census.ic.total as u64;
            totals[2] +=
                (census.alarm.total + census.participant.total + census.non_urgent.total) as u64;
            totals[3] += census.neutral.total as u64;
        }
        let expected =
            [params.pc_rate, params.ic_rate, params.r_rate, params.n_rate].map(|p| p * cells);
        for (i, (&total, exp)) in totals.iter().zip(expected).enumerate() {
            let p = [params.pc_rate, params.ic_rate, params.r_rate, params.n_rate][i];
            let std_err = (cells * p * (1.0 - p) / seeds as f64).sqrt();
            let mean = total as f64 / seeds as f64;
            assert!(
                (mean - exp).abs() <= 3.0 * std_err,
                "role {i}: mean {mean} not within 3 SE ({std_err}) of {exp}"
            );
        }
    }

    #[test]
    fn churn_count_zero_changes_nothing() {
        let params = SimParams { churn_count: 0, steps: 5, ..SimParams::default() };
        let mut sim = Simulation::new(params).unwrap();
        let before = sim.grid().clone();
        let report = sim.step();
        assert!(report.churned.is_empty());
        // no churn, but dispatch still runs; roles only change through
        // matching, so compare only cells that were not dispatched
        let census_before = role_census(&before);
        let census_after = role_census(sim.grid());
        assert_eq!(census_before.pc.total, census_after.pc.total);
        assert_eq!(census_before.ic.total, census_after.ic.total);
    }

    #[test]
    fn churn_skips_grids_with_no_eligible_cells() {
        let params = SimParams {
            pc_rate: 1.0,
            ic_rate: 0.0,
            r_rate: 0.0,
            n_rate: 0.0,
            grid_w: 3,
            grid_h: 3,
            ..SimParams::default()
        };
        let mut sim = Simulation::new(params).unwrap();
        let report = sim.step();
        assert!(report.churned.is_empty());
        assert_eq!(role_census(sim.grid()).pc.total, 9);
    }

    #[test]
    fn churn_target_frequencies_match_the_rates() {
        // default churn rates: 5% informal carer, 5% neutral, 90% requester
        // split 15/15/70 into alarm/participant/non-urgent
        let params = SimParams {
            pc_rate: 0.0,
            ic_rate: 0.0,
            r_rate: 0.0,
            n_rate: 1.0,
            grid_w: 10,
            grid_h: 10,
            ..SimParams::default()
        };
        let mut tallies = (0u64, 0u64, 0u64); // ic, neutral, requester
        let mut kinds = (0u64, 0u64, 0u64); // alarm, participant, non-urgent
        let mut draws = 0u64;
        for seed in 0..400 {
            let mut sim = Simulation::new(SimParams { seed, ..params.clone() }).unwrap();
            let report = sim.step();
            assert_eq!(report.churned.len(), 5);
            for (_, _, new_role) in report.churned {
                draws += 1;
                match new_role {
                    Role::InformalCarer => tallies.0 += 1,
                    Role::Neutral => tallies.1 += 1,
                    Role::Requester(kind) => {
                        tallies.2 += 1;
                        match kind {
                            RequestKind::Alarm => kinds.0 += 1,
                            RequestKind::Participant(_) => kinds.1 += 1,
                            RequestKind::NonUrgent => kinds.2 += 1,
                        }
                    }
                    Role::ProfessionalCarer => panic!("churn may never mint a professional"),
                }
            }
        }
        let n = draws as f64;
        let within = |observed: u64, p: f64, trials: f64| {
            let se = (p * (1.0 - p) / trials).sqrt();
            let freq = observed as f64 / trials;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "frequency {freq} not within 3 SE of {p} over {trials} draws"
            );
        };
        within(tallies.0, 0.05, n);
        within(tallies.1, 0.05, n);
        within(tallies.2, 0.90, n);
        let req = tallies.2 as f64;
        within(kinds.0, 0.15, req);
        within(kinds.1, 0.15, req);
        within(kinds.2, 0.70, req);
    }

    #[test]
    fn churned_waiting_requester_is_cancelled_not_failed() {
        // every re-roll becomes an informal carer, so the waiting requester
        // must lose its request without a failure being counted
        let params = SimParams {
            grid_w: 2,
            grid_h: 2,
            churn_count: 8,
            ic_d: 1.0,
            n_d: 0.0,
            ..SimParams::default()
        };
        let mut grid = Grid::new(2, 2).unwrap();
        let mut requests = RequestBook::new();
        place_waiting_requester(&mut grid, &mut requests, cid(0, 0), RequestKind::NonUrgent, &params, true);
        let mut sim =
            Simulation::from_state(params, grid, ActivitySet::new(), requests).unwrap();
        let report = sim.step();
        assert_eq!(report.churned.len(), 4);
        assert!(report
            .churned
            .iter()
            .any(|&(id, old, new)| id == cid(0, 0)
                && old == Role::Requester(RequestKind::NonUrgent)
                && new == Role::InformalCarer));
        assert_eq!(sim.failures(), 0);
        assert!(sim.requests().is_empty());
        assert!(report.aborted.is_empty());
    }

    #[test]
    fn serving_pairs_count_down_and_dissolve() {
        let params = scripted(2, 2);
        let mut grid = Grid::new(2, 2).unwrap();
        let mut requests = RequestBook::new();
        place(&mut grid, cid(0, 0), Role::InformalCarer);
        grid.cell_mut(cid(0, 0)).engagement =
            Engagement::Serving { target: cid(1, 1), remaining: 2 };
        grid.cell_mut(cid(1, 1)).role = Role::Requester(RequestKind::NonUrgent);
        grid.cell_mut(cid(1, 1)).engagement =
            Engagement::BeingServed { carer: cid(0, 0), remaining: 2 };
        let mut req = Request::new(cid(1, 1), RequestKind::NonUrgent, 0, &params, true);
        req.state = RequestState::Active;
        requests.insert(req);
        let mut sim =
            Simulation::from_state(params, grid, ActivitySet::new(), requests).unwrap();

        let first = sim.step();
        assert_eq!(first.completed_interactions, 0);
        assert_eq!(
            sim.grid().cell(cid(0, 0)).engagement,
            Engagement::Serving { target: cid(1, 1), remaining: 1 }
        );

        let second = sim.step();
        assert_eq!(second.completed_interactions, 1);
        assert_eq!(sim.grid().cell(cid(0, 0)).engagement, Engagement::Idle);
        assert_eq!(sim.grid().cell(cid(0, 0)).role, Role::InformalCarer);
        assert_eq!(sim.grid().cell(cid(1, 1)).role, Role::Neutral);
        assert!(sim.requests().is_empty());
        assert_eq!(sim.failures(), 0);
    }

    #[test]
    fn ongoing_activity_dissolves_when_time_is_up() {
        let params = scripted(2, 2);
        let mut grid = Grid::new(2, 2).unwrap();
        let mut requests = RequestBook::new();
        let mut activities = ActivitySet::new();
        let a = activities.create(0, cid(0, 0), 0);
        activities.get_mut(a).unwrap().members.insert(cid(0, 1));
        activities.get_mut(a).unwrap().state = ActivityState::Ongoing { remaining: 1 };
        for id in [cid(0, 0), cid(0, 1)] {
            grid.cell_mut(id).role = Role::Requester(RequestKind::Participant(0));
            grid.cell_mut(id).engagement = Engagement::Participating { activity: a };
            let mut req = Request::new(id, RequestKind::Participant(0), 0, &params, false);
            req.state = RequestState::Active;
            requests.insert(req);
        }
        let mut sim = Simulation::from_state(params, grid, activities, requests).unwrap();

        let report = sim.step();
        assert_eq!(report.completed_interactions, 1);
        assert!(sim.activities().is_empty());
        assert!(sim.requests().is_empty());
        for id in [cid(0, 0), cid(0, 1)] {
            assert_eq!(sim.grid().cell(id).role, Role::Neutral);
            assert_eq!(sim.grid().cell(id).engagement, Engagement::Idle);
        }
    }

    #[test]
    fn unmatched_request_aborts_exactly_at_its_deadline() {
        // no carers anywhere: the non-urgent request can never match and
        // must abort when the step counter reaches created + horizon
        let params = scripted(2, 2); // deadline_nonurgent = 50
        let mut grid = Grid::new(2, 2).unwrap();
        let mut requests = RequestBook::new();
        place_waiting_requester(&mut grid, &mut requests, cid(0, 0), RequestKind::NonUrgent, &params, false);
        let mut sim =
            Simulation::from_state(params.clone(), grid, ActivitySet::new(), requests).unwrap();

        for expected_step in 1..params.deadline_nonurgent {
            let report = sim.step();
            assert!(report.aborted.is_empty(), "aborted early at step {expected_step}");
            assert_eq!(sim.failures(), 0);
        }
        let report = sim.step();
        assert_eq!(report.step, params.deadline_nonurgent);
        assert_eq!(report.aborted, vec![cid(0, 0)]);
        assert_eq!(sim.failures(), 1);
        assert_eq!(sim.grid().cell(cid(0, 0)).role, Role::Neutral);
        assert!(sim.requests().is_empty());
    }

    #[test]
    fn lone_participant_falls_through_after_the_window() {
        let params = SimParams { participant_wait_window: 3, ..scripted(3, 3) };
        let mut grid = Grid::new(3, 3).unwrap();
        let mut requests = RequestBook::new();
        place_waiting_requester(
            &mut grid, &mut requests, cid(1, 1), RequestKind::Participant(0), &params, false,
        );
        let mut sim =
            Simulation::from_state(params, grid, ActivitySet::new(), requests).unwrap();

        let first = sim.step();
        assert_eq!(first.dispatched.len(), 1);
        assert!(matches!(first.dispatched[0].1, DispatchOutcome::InitiatedActivity(_)));
        assert_eq!(sim.activities().len(), 1);

        let second = sim.step();
        assert!(second.dispatched.is_empty(), "window not yet expired");

        let third = sim.step();
        // the request leaves its forming activity and is re-parsed in the
        // same step; with no carers it stays in the queue
        assert_eq!(
            third.dispatched,
            vec![
                (cid(1, 1), DispatchOutcome::FallThroughToNonUrgent),
                (cid(1, 1), DispatchOutcome::StillWaiting),
            ]
        );
        assert!(sim.activities().is_empty());
        let req = sim.requests().get(cid(1, 1)).unwrap();
        assert!(req.fell_through);
        assert_eq!(req.state, RequestState::WaitingMatch);
        assert_eq!(req.created, 0, "fall-through keeps the original creation time");
        assert_eq!(sim.latency(), 3.0, "waiting time keeps accruing from creation");
    }

    #[test]
    fn infinite_deadlines_never_fail() {
        let params = SimParams {
            deadline_alarm: u64::MAX,
            deadline_nonurgent: u64::MAX,
            ..scripted(2, 2)
        };
        let mut grid = Grid::new(2, 2).unwrap();
        let mut requests = RequestBook::new();
        place_waiting_requester(&mut grid, &mut requests, cid(0, 0), RequestKind::Alarm, &params, false);
        place_waiting_requester(&mut grid, &mut requests, cid(1, 1), RequestKind::NonUrgent, &params, false);
        let mut sim =
            Simulation::from_state(params, grid, ActivitySet::new(), requests).unwrap();
        for _ in 0..200 {
            sim.step();
        }
        assert_eq!(sim.failures(), 0);
        assert_eq!(sim.requests().len(), 2);
        assert_eq!(sim.latency(), 200.0);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let params =
            SimParams { grid_w: 8, grid_h: 8, steps: 150, record_every: 10, ..SimParams::default() };
        let (summary_a, snaps_a) = run(&params).unwrap();
        let (summary_b, snaps_b) = run(&params).unwrap();
        assert_eq!(snaps_a, snaps_b);
        assert_eq!(summary_a, summary_b);

        let reseeded = SimParams { seed: 1, ..params };
        let (_, snaps_c) = run(&reseeded).unwrap();
        assert_ne!(snaps_a, snaps_c, "different seeds should diverge");
    }

    #[test]
    fn snapshots_follow_the_recording_cadence() {
        let params =
            SimParams { grid_w: 6, grid_h: 6, steps: 95, record_every: 10, ..SimParams::default() };
        let (_, snaps) = run(&params).unwrap();
        assert_eq!(snaps.len(), 9);
        let steps: Vec<u64> = snaps.iter().map(|s| s.step).collect();
        assert_eq!(steps, (1..=9).map(|i| i * 10).collect::<Vec<_>>());

        let empty = SimParams { steps: 0, ..params };
        let (summary, snaps) = run(&empty).unwrap();
        assert!(snaps.is_empty());
        assert_eq!(summary, RunSummary::default());
    }

    #[test]
    fn no_requesters_means_no_failures_and_no_waiting() {
        let params = SimParams {
            pc_rate: 0.1,
            ic_rate: 0.3,
            r_rate: 0.0,
            n_rate: 0.6,
            ic_d: 0.5,
            n_d: 0.5,
            grid_w: 8,
            grid_h: 8,
            steps: 100,
            record_every: 5,
            ..SimParams::default()
        };
        let (summary, snaps) = run(&params).unwrap();
        assert_eq!(summary.failures_total, 0);
        assert_eq!(summary.ave_latency, 0.0);
        assert!(snaps.iter().all(|s| s.mean_wait == 0.0 && s.failures_cum == 0));
    }

    #[test]
    fn professional_count_is_invariant_and_failures_monotone() {
        let params =
            SimParams { grid_w: 10, grid_h: 10, steps: 300, record_every: 10, ..SimParams::default() };
        let mut sim = Simulation::new(params).unwrap();
        let pc_at_start = role_census(sim.grid()).pc.total;
        let mut last_failures = 0;
        for _ in 0..300 {
            sim.step();
            let census: RoleCensus = role_census(sim.grid());
            assert_eq!(census.pc.total, pc_at_start);
            assert!(sim.failures() >= last_failures);
            last_failures = sim.failures();
        }
    }
}
