//! Drives the `csrep` command line in-process: build, transform, verify,
//! params and bench on a small model in a temporary directory.

fn run(args: &[&str]) -> i32 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = csrep::cli::run(
        std::iter::once("csrep").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    println!("$ csrep {}  (exit {code})", args.join(" "));
    print!("{}", String::from_utf8_lossy(&out));
    eprint!("{}", String::from_utf8_lossy(&err));
    code
}

fn main() -> std::io::Result<()> {
    let dir = std::env::temp_dir().join("csrep-cli-tour");
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name).display().to_string();
    std::fs::write(
        p("config.json"),
        r#"{ "channels": 64, "se_bottleneck": 16, "fc_hidden": 64, "embedding_dim": 32, "dtype": "fp64" }"#,
    )?;

    run(&[
        "build",
        "--config",
        &p("config.json"),
        "--seed",
        "3",
        "--out",
        &p("multi.csrp"),
    ]);
    run(&[
        "transform",
        "--input",
        &p("multi.csrp"),
        "--out",
        &p("plain.csrp"),
        "--self-check",
    ]);
    run(&[
        "verify",
        &p("multi.csrp"),
        &p("plain.csrp"),
        "--trials",
        "3",
    ]);
    run(&["--format", "json", "params", "--model", &p("plain.csrp")]);
    run(&[
        "bench",
        "--model",
        &p("plain.csrp"),
        "--iters",
        "5",
        "--frames",
        "100",
    ]);
    std::fs::remove_dir_all(&dir)
}
