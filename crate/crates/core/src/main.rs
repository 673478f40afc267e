fn main() -> std::process::ExitCode {
    fedcc_core::cli::main()
}
