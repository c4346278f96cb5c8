fn main() {
    std::process::exit(cql::cli::main());
}
