use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(raw) = std::env::var("COLDDAMP_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not apply COLDDAMP_THREADS={raw}: {e}");
                }
            }
            _ => log::warn!("ignoring COLDDAMP_THREADS={raw}: expected a positive integer"),
        }
    }
    ExitCode::from(colddamp::cli::run() as u8)
}
