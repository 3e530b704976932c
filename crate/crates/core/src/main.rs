fn main() { std::process::exit(spoofcert::cli::main_exit()) }
