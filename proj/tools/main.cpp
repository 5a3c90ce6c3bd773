#include "restoredet/cli.hpp"

int main(int argc, char** argv) { return restoredet::cli::dispatch(argc, argv); }
