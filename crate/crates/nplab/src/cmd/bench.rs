// SPDX-License-Identifier: Apache-2.0

use npcore::tasks::{gen_task, TaskSpec};

use super::Ctx;
use crate::io::{self, dataset_to_csv};
use crate::CliError;

pub fn gen(ctx: &Ctx) -> Result<String, CliError> {
    let (mut spec, raw) = io::load_config::<TaskSpec>(ctx.global.config.as_deref())?;
    if let Some(s) = ctx.global.seed {
        spec.seed = s;
    }
    let dir = ctx.require_out()?;
    let (train, test) = gen_task(&spec)?;
    io::write_atomic(&dir.join("train.csv"), &dataset_to_csv(&train))?;
    io::write_atomic(&dir.join("test.csv"), &dataset_to_csv(&test))?;
    let summary = serde_json::json!({
        "task": spec.task.name(),
        "d": train.d(),
        "m": train.m(),
        "n_train": train.n(),
        "n_test": test.n(),
    });
    ctx.finish(&raw, &summary)?;
    Ok(format!("OK task={} train={} test={}", spec.task.name(), train.n(), test.n()))
}
