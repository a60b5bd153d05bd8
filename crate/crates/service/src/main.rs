use clap::Parser;
use deltagan_service::{serve, ServeArgs};

#[derive(Parser)]
#[command(name = "deltagan-serve", about = "Serve a gesture translation checkpoint over HTTP")]
struct Cli {
    #[command(flatten)]
    serve: ServeArgs,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    serve(Cli::parse().serve).await
}
