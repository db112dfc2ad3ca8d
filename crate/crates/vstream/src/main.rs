fn main() {
    std::process::exit(vstream::cli::main_entry());
}
