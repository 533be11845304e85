fn main() {
    std::process::exit(psn_cli::main_entry());
}
