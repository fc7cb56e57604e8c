use clap::Parser;

fn main() {
    let args = jolt::cli::Args::parse();
    match jolt::cli::dispatch(args) {
        Ok(text) => println!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
