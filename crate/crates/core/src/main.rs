fn main() -> std::process::ExitCode {
    gfk::cli::main()
}
