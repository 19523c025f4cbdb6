fn main() {
    // Dying quietly on a closed pipe (`uniloop keys | head`) is normal unix
    // behavior; without this, println! panics on EPIPE instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(uniloop::cli::run());
}
