use chrono::NaiveDate;
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridling::accounting::AccountingLog;
use gridling::accounts::{AccountsDb, QosTable};
use gridling::cluster::{Fleet, Node};
use gridling::jobspec::JobRequest;
use gridling::scheduler::Scheduler;

fn accounts(users: u32) -> AccountsDb {
    let mut db = AccountsDb::new(QosTable::default());
    for i in 0..users {
        db.create(
            &format!("u{i}"),
            "normal",
            NaiveDate::from_ymd_opt(2099, 1, 1).unwrap(),
            1000,
            1000,
            1_000_000,
            10,
        )
        .unwrap();
    }
    db
}

/// A loaded queue: `jobs` pending submissions across 8 users on a 6-node
/// fleet, mirroring a busy shared-cluster morning.
fn queue(jobs: u32, db: &AccountsDb) -> (Scheduler, Fleet, AccountingLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sched = Scheduler::new();
    let mut log = AccountingLog::new();
    let fleet = Fleet::new(
        (0..6)
            .map(|i| Node::new(&format!("n{i}"), 4, 64_000, 16))
            .collect(),
    );
    for t in 0..jobs {
        let req = JobRequest {
            gpus: rng.gen_range(0..=2),
            mem_mb: rng.gen_range(1000..=16_000),
            command: vec!["job".to_string()],
            ..JobRequest::default()
        };
        sched
            .submit(req, &format!("u{}", t % 8), t as i64, db, &mut log)
            .unwrap();
    }
    (sched, fleet, log)
}

fn bench_scheduler(c: &mut Criterion) {
    let db = accounts(8);
    for jobs in [16u32, 128, 1024] {
        c.bench_function(&format!("schedule_cycle/{jobs}_pending"), |b| {
            b.iter_batched(
                || queue(jobs, &db),
                |(mut sched, mut fleet, mut log)| {
                    black_box(
                        sched
                            .schedule_cycle(jobs as i64, &mut fleet, &db, &mut log)
                            .unwrap(),
                    )
                },
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, bench_scheduler);
criterion_main!(benches);
