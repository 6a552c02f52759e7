fn main() {
    std::process::exit(callcenter::cli::main());
}
