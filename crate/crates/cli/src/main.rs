use clap::Parser;
use magic_nas_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => println!("{}", line),
        Err(e) => {
            eprintln!("magic-nas: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}
