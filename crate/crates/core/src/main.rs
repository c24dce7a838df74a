fn main() -> std::process::ExitCode {
    scamlens::cli::main()
}
