use clap::Parser;

/// Budget-conditioned trajectory planning service.
#[derive(Parser)]
#[command(name = "trebi-server", version)]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "TREBI_BIND", default_value = "127.0.0.1:7878")]
    bind: String,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    let args = Args::parse();
    let listener = match tokio::net::TcpListener::bind(&args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("trebi-server: cannot bind {}: {e}", args.bind);
            return std::process::ExitCode::FAILURE;
        }
    };
    eprintln!("trebi-server listening on http://{}", args.bind);
    if let Err(e) = trebi_server::serve(listener).await {
        eprintln!("trebi-server: {e}");
        return std::process::ExitCode::FAILURE;
    }
    std::process::ExitCode::SUCCESS
}
