fn main() {
    eprintln!("semidot: command-line interface not yet wired");
    std::process::exit(2);
}
