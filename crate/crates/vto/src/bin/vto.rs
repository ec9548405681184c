fn main() {
    std::process::exit(vto::cli::main_entry());
}
