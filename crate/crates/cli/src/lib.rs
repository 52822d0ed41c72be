pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{Options, Outcome};
pub use config::RunConfig;

/// Process exit status for an error: container-format codes pass through,
/// divergence gets its own status, everything else is 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use mergeforge::Error;
    for cause in err.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::Format(f)) => return f.code(),
            Some(Error::Diverged { .. }) => return 3,
            _ => {}
        }
        if let Some(f) = cause.downcast_ref::<mergeforge::FormatError>() {
            return f.code();
        }
    }
    1
}

/// Sizes the global worker pool from `MERGEFORGE_THREADS`, if set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MERGEFORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("MERGEFORGE_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("MERGEFORGE_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
