fn main() {
    match imupose::commands::main_with_args(std::env::args().collect()) {
        Ok(r) => {
            for (k, v) in &r.metrics {
                println!("{k}: {v}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
