fn main() {
    std::process::exit(orbitedit::cli::main_entry());
}
