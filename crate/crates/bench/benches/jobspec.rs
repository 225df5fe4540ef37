use criterion::{black_box, criterion_group, criterion_main, Criterion};

use gridling::jobspec::{parse_job_file, render_job_file, JobRequest};

const JOB_FILE: &str = "#!/bin/bash\n\
#SBATCH -N 1\n\
#SBATCH --job-name=train\n\
#SBATCH --output=/storage/u/train.out\n\
#SBATCH --error=/storage/u/train.err\n\
#SBATCH --time=2-00:00\n\
#SBATCH --mem=36000\n\
#SBATCH --qos=normal\n\
#SBATCH --gres=gpu:1\n\
srun /usr/bin/python train.py\n";

fn bench_jobspec(c: &mut Criterion) {
    c.bench_function("parse_job_file", |b| {
        b.iter(|| parse_job_file(black_box(JOB_FILE)).unwrap())
    });

    let req = JobRequest {
        gpus: 2,
        mem_mb: 36000,
        time_limit_min: 2880,
        command: vec!["python".to_string(), "train.py".to_string()],
        ..JobRequest::default()
    };
    c.bench_function("render_job_file", |b| {
        b.iter(|| render_job_file(black_box(&req)))
    });
}

criterion_group!(benches, bench_jobspec);
criterion_main!(benches);
