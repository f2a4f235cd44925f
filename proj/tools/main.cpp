#include <exception>
#include <iostream>

#include "cli_common.hpp"

int main(int argc, char** argv) {
    using namespace canopyuq;
    CLI::App app{"canopyuq: uncertainty-aware canopy height regression pipeline"};
    app.require_subcommand(1);

    cli::register_composite(app);
    cli::register_dataset(app);
    cli::register_weights(app);
    cli::register_train(app);
    cli::register_infer(app);
    cli::register_calibrate(app);
    cli::register_harmonize(app);
    cli::register_evaluate(app);
    cli::register_pipeline(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kBadArgs;
    } catch (const ArgError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kBadArgs;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return cli::kNumericError;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return cli::kDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kDataError;
    }
    return cli::kOk;
}
