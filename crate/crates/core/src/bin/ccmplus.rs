fn main() -> std::process::ExitCode {
    ccmplus::cli::run()
}
