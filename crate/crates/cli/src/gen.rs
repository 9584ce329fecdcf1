use mdp_core::dataset::synth::{blobs, spiral, BlobSpec};

use crate::args::{DatasetKind, GenArgs};
use crate::error::CliError;

pub fn gen_dataset(args: &GenArgs) -> Result<(), CliError> {
    let (classes, per_class) = (args.classes as usize, args.per_class as usize);
    let ds = match args.kind {
        DatasetKind::Blobs => {
            let positive = |v: f64| v > 0.0 && v.is_finite();
            if !positive(args.sigma) || !positive(args.separation) {
                return Err(CliError::Usage(
                    "--sigma and --separation must be positive".into(),
                ));
            }
            blobs(&BlobSpec {
                sigma: args.sigma,
                separation: args.separation,
                ..BlobSpec::new(classes, args.dims as usize, per_class, args.seed)
            })?
        }
        DatasetKind::Spiral => spiral(classes, per_class, args.seed)?,
    };
    ds.save(&args.out)?;
    eprintln!(
        "wrote {} rows x {} features, {} classes to {}",
        ds.len(),
        ds.dims(),
        ds.n_classes(),
        args.out.display()
    );
    Ok(())
}
