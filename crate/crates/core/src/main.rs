fn main() -> std::process::ExitCode {
    epirefine::cli::main()
}
