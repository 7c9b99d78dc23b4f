fn main() -> std::process::ExitCode {
    stip::cli::main()
}
