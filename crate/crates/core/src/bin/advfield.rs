fn main() -> std::process::ExitCode {
    advfield::cli::main()
}
