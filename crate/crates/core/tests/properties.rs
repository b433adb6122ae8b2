mod support;

use support::random_runner;

fn pass(r: Result<(), String>) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn ready_tasks_match_the_brute_force_predicate() {
    pass(support::ready_tasks_match_the_brute_force_predicate(
        &mut random_runner(1000),
    ));
}

#[test]
fn completing_a_task_never_shrinks_the_ready_set() {
    pass(support::completing_a_task_never_shrinks_the_ready_set(
        &mut random_runner(1000),
    ));
}

#[test]
fn folding_before_or_after_a_delta_commutes() {
    pass(support::folding_before_or_after_a_delta_commutes(
        &mut random_runner(200),
    ));
}

#[test]
fn engine_keeps_its_invariants_under_random_runs() {
    pass(support::engine_keeps_its_invariants_under_random_runs(
        &mut random_runner(1000),
    ));
}

#[test]
fn every_message_type_round_trips() {
    pass(support::every_message_type_round_trips(&mut random_runner(
        10_000,
    )));
}

#[test]
fn generator_covers_all_nine_types() {
    let seen = support::generated_types(2000);
    assert_eq!(seen.len(), 9, "{seen:?}");
}

#[test]
fn duplicate_idempotent_delivery_converges() {
    pass(support::duplicate_idempotent_delivery_converges(
        &mut random_runner(500),
    ));
}

#[test]
fn replayed_command_is_refused() {
    pass(support::replayed_command_is_refused());
}

#[test]
fn duplicate_register_gives_identical_registry() {
    pass(support::duplicate_register_gives_identical_registry());
}

#[test]
fn backoff_schedule_follows_the_formula() {
    pass(support::backoff_schedule_follows_the_formula(
        &mut random_runner(500),
    ));
}
