fn main() -> std::process::ExitCode {
    covlab::cli::main()
}
