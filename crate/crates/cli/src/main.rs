use std::process::ExitCode;

fn main() -> ExitCode {
    match flowsynth_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.code == 0 => {
            print!("{e}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            // clap renders its own prefix and trailing newline
            if e.message.starts_with("error:") {
                eprint!("{e}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.code as u8)
        }
    }
}
