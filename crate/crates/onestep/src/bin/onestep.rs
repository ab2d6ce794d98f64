fn main() -> std::process::ExitCode {
    onestep::cli::main()
}
