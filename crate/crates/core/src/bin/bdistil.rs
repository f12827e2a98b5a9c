fn main() -> std::process::ExitCode {
    bdistil::cli::main()
}
