fn main() -> std::process::ExitCode {
    afford_core::cli::main()
}
