use derain_core::train::{make_toy_dataset, ToyDatasetSpec};

use crate::args::DatasetArgs;
use crate::CliResult;

pub fn cmd_make_dataset(args: &DatasetArgs) -> CliResult<()> {
    let spec = ToyDatasetSpec {
        count: args.count,
        size: args.size,
        val_fraction: args.val_fraction,
        seed: args.seed,
        ..ToyDatasetSpec::default()
    };
    make_toy_dataset(&spec, &args.out)?;
    println!(
        "dataset={} count={} size={} val_fraction={} seed={}",
        args.out.display(),
        spec.count,
        spec.size,
        spec.val_fraction,
        spec.seed
    );
    Ok(())
}
