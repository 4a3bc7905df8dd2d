use std::process::exit;

fn main() {
    exit(energy_attack::cli::main_entry(std::env::args_os()));
}
