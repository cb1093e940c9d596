//! Request dispatch: priority ordering, the request-parsing branch logic,
//! carer selection, and activity membership transitions.
//!
//! Requests are parsed in strict class priority (alarm, then participant,
//! then non-urgent). Alarms are served by professional carers only and keep
//! waiting when none is idle. Participant requests join the oldest joinable
//! activity of their type or initiate a new one; once a forming activity has
//! waited out the requester's time window the request falls through and is
//! matched as non-urgent. Non-urgent requests follow the requester's drawn
//! preference: informal carer by proximity first with a professional
//! fallback, or a professional carer directly.

use rand::Rng;

use crate::model::{
    ActivityId, ActivitySet, ActivityState, ActivityTag, CellId, Engagement, Grid, Request,
    RequestBook, RequestKind, RequestState, Role, SimParams,
};

/// Result of handling one request during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchOutcome {
    ServedByPC(CellId),
    ServedByIC(CellId),
    JoinedActivity(ActivityId),
    InitiatedActivity(ActivityId),
    StillWaiting,
    /// Participant request whose forming wait window expired; it re-enters
    /// the queue as non-urgent in the same step.
    FallThroughToNonUrgent,
}

/// Verdict of the per-step time-constraint check on a forming member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeCheck {
    KeepWaiting,
    FallThroughToNonUrgent,
}

/// One branch predicate evaluated while parsing a request, recorded in
/// evaluation order by [`parse_request_traced`]. Requests that fail both
/// checks take the residual non-urgent path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    IsAlarm(bool),
    IsParticipant(bool),
}

/// Sort pending requests into dispatch order: alarm before participant
/// before non-urgent, older requests first within a class, row-major owner
/// order on ties. Fallen-through participant requests queue in the
/// non-urgent class they are matched in.
pub fn priority_order(mut pending: Vec<Request>) -> Vec<Request> {
    pending.sort_by_key(|r| (r.dispatch_kind().priority_class(), r.created, r.owner));
    pending
}

/// Parse one pending request and apply the resulting match to the world.
///
/// The owner must hold a pending (unmatched) request; anything else is a
/// caller bug and panics.
pub fn parse_request(
    owner: CellId,
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    params: &SimParams,
    rng: &mut impl Rng,
    now: u64,
) -> DispatchOutcome {
    parse_inner(owner, grid, activities, requests, params, rng, now, &mut None)
}

/// [`parse_request`] with the evaluated branch predicates appended to
/// `trace`, for tests that pin the branch order.
pub fn parse_request_traced(
    owner: CellId,
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    params: &SimParams,
    rng: &mut impl Rng,
    now: u64,
    trace: &mut Vec<Predicate>,
) -> DispatchOutcome {
    parse_inner(owner, grid, activities, requests, params, rng, now, &mut Some(trace))
}

#[allow(clippy::too_many_arguments)]
fn parse_inner(
    owner: CellId,
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    params: &SimParams,
    rng: &mut impl Rng,
    now: u64,
    trace: &mut Option<&mut Vec<Predicate>>,
) -> DispatchOutcome {
    let req = *requests.get(owner).unwrap_or_else(|| panic!("no request owned by {owner}"));
    assert!(req.is_pending(), "request of {owner} is not pending");
    let kind = req.dispatch_kind();

    let is_alarm = kind == RequestKind::Alarm;
    note(trace, Predicate::IsAlarm(is_alarm));
    if is_alarm {
        return match select_professional_carer(grid, rng) {
            Some(pc) => {
                engage_pair(grid, requests, pc, owner, params);
                DispatchOutcome::ServedByPC(pc)
            }
            None => DispatchOutcome::StillWaiting,
        };
    }

    let is_participant = matches!(kind, RequestKind::Participant(_));
    note(trace, Predicate::IsParticipant(is_participant));
    if let RequestKind::Participant(tag) = kind {
        return join_or_initiate(owner, tag, grid, activities, requests, params, now);
    }

    // Non-urgent path: follow the preference drawn at request creation. A
    // requester preferring professional care never occupies an informal
    // carer, even an idle one.
    if req.prefers_informal {
        if let Some(ic) = select_informal_carer(grid, owner, rng) {
            engage_pair(grid, requests, ic, owner, params);
            return DispatchOutcome::ServedByIC(ic);
        }
    }
    match select_professional_carer(grid, rng) {
        Some(pc) => {
            engage_pair(grid, requests, pc, owner, params);
            DispatchOutcome::ServedByPC(pc)
        }
        None => DispatchOutcome::StillWaiting,
    }
}

fn note(trace: &mut Option<&mut Vec<Predicate>>, predicate: Predicate) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(predicate);
    }
}

/// Join the oldest joinable activity of the request's type, or initiate a
/// new forming one. Joining an ongoing activity engages the requester
/// immediately; a forming activity that reaches the minimum size starts and
/// engages every member.
pub fn join_or_initiate(
    owner: CellId,
    tag: ActivityTag,
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    params: &SimParams,
    now: u64,
) -> DispatchOutcome {
    let joinable = activities
        .iter()
        .find(|a| {
            a.activity_type == tag
                && a.members.len() < params.activity_capacity as usize
                && !matches!(a.state, ActivityState::Finished)
        })
        .map(|a| (a.id, a.state));

    match joinable {
        Some((id, ActivityState::Ongoing { .. })) => {
            activities.get_mut(id).unwrap().members.insert(owner);
            grid.cell_mut(owner).engagement = Engagement::Participating { activity: id };
            requests.get_mut(owner).unwrap().state = RequestState::Active;
            DispatchOutcome::JoinedActivity(id)
        }
        Some((id, ActivityState::Forming)) => {
            activities.get_mut(id).unwrap().members.insert(owner);
            requests.get_mut(owner).unwrap().state = RequestState::InForming(id);
            start_if_ready(id, grid, activities, requests, params);
            DispatchOutcome::JoinedActivity(id)
        }
        Some((id, ActivityState::Finished)) => {
            unreachable!("{id} is finished but retained in the set")
        }
        None => {
            let id = activities.create(tag, owner, now);
            requests.get_mut(owner).unwrap().state = RequestState::InForming(id);
            start_if_ready(id, grid, activities, requests, params);
            DispatchOutcome::InitiatedActivity(id)
        }
    }
}

/// Start a forming activity that has gathered the minimum size: all members
/// switch to participating and their requests become active. A zero
/// activity duration completes the activity on the spot.
fn start_if_ready(
    id: ActivityId,
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    params: &SimParams,
) {
    let ready = {
        let act = activities.get(id).unwrap();
        act.state == ActivityState::Forming
            && act.members.len() >= params.activity_min_size as usize
    };
    if !ready {
        return;
    }
    if params.activity_duration == 0 {
        finish_activity(grid, activities, requests, id);
        return;
    }
    let act = activities.get_mut(id).unwrap();
    act.state = ActivityState::Ongoing { remaining: params.activity_duration };
    let members: Vec<CellId> = act.members.iter().copied().collect();
    for m in members {
        grid.cell_mut(m).engagement = Engagement::Participating { activity: id };
        requests.get_mut(m).unwrap().state = RequestState::Active;
    }
}

/// Time-constraint check for a member of a forming activity: once the
/// request has waited out the window it falls through to non-urgent
/// matching.
pub fn check_time_constraint(req: &Request, params: &SimParams, now: u64) -> TimeCheck {
    debug_assert!(matches!(req.state, RequestState::InForming(_)));
    if now.saturating_sub(req.created) >= params.participant_wait_window {
        TimeCheck::FallThroughToNonUrgent
    } else {
        TimeCheck::KeepWaiting
    }
}

/// Nearest idle informal carer by Chebyshev distance; distance ties are
/// broken uniformly at random from the run's stream.
pub fn select_informal_carer(grid: &Grid, from: CellId, rng: &mut impl Rng) -> Option<CellId> {
    let mut best: Option<u32> = None;
    let mut ties: Vec<CellId> = Vec::new();
    for (id, cell) in grid.iter() {
        if cell.role != Role::InformalCarer || cell.engagement != Engagement::Idle {
            continue;
        }
        let d = from.chebyshev(id);
        match best {
            None => {
                best = Some(d);
                ties.push(id);
            }
            Some(b) if d < b => {
                best = Some(d);
                ties.clear();
                ties.push(id);
            }
            Some(b) if d == b => ties.push(id),
            Some(_) => {}
        }
    }
    pick_uniform(&ties, rng)
}

/// Uniformly random idle professional carer. Professional carers form one
/// global pool; distance plays no part.
pub fn select_professional_carer(grid: &Grid, rng: &mut impl Rng) -> Option<CellId> {
    let idle: Vec<CellId> = grid
        .iter()
        .filter(|(_, c)| c.role == Role::ProfessionalCarer && c.engagement == Engagement::Idle)
        .map(|(id, _)| id)
        .collect();
    pick_uniform(&idle, rng)
}

fn pick_uniform(candidates: &[CellId], rng: &mut impl Rng) -> Option<CellId> {
    match candidates.len() {
        0 => None,
        1 => Some(candidates[0]),
        n => Some(candidates[rng.random_range(0..n)]),
    }
}

/// Engage a carer-requester pair for `service_duration` steps. A zero
/// duration completes the request on the spot, leaving the carer idle.
fn engage_pair(
    grid: &mut Grid,
    requests: &mut RequestBook,
    carer: CellId,
    owner: CellId,
    params: &SimParams,
) {
    if params.service_duration == 0 {
        complete_requester(grid, requests, owner);
        return;
    }
    grid.cell_mut(carer).engagement =
        Engagement::Serving { target: owner, remaining: params.service_duration };
    grid.cell_mut(owner).engagement =
        Engagement::BeingServed { carer, remaining: params.service_duration };
    requests.get_mut(owner).unwrap().state = RequestState::Active;
}

/// A served requester returns to neutral and its completed request leaves
/// the book.
pub(crate) fn complete_requester(grid: &mut Grid, requests: &mut RequestBook, owner: CellId) {
    let cell = grid.cell_mut(owner);
    cell.role = Role::Neutral;
    cell.engagement = Engagement::Idle;
    requests.remove(owner).unwrap_or_else(|| panic!("no request owned by {owner}"));
}

/// Dissolve an activity, completing every member's request.
pub(crate) fn finish_activity(
    grid: &mut Grid,
    activities: &mut ActivitySet,
    requests: &mut RequestBook,
    id: ActivityId,
) {
    let mut act = activities.remove(id).unwrap_or_else(|| panic!("no such {id}"));
    act.state = ActivityState::Finished;
    for member in &act.members {
        complete_requester(grid, requests, *member);
    }
}
