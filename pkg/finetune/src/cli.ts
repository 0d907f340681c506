/** `train` command: fine-tune LoRA adapters on an exported chat dataset. */

import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { epochMeanLosses, loadTrainingConfig, train } from './train.js';

export async function main(argv: string[] = hideBin(process.argv)): Promise<number> {
  const parser = yargs(argv)
    .scriptName('tableval-finetune')
    .command(
      'train',
      'train LoRA adapters on an exported chat-format dataset',
      (cmd) =>
        cmd
          .option('dataset', { type: 'string', demandOption: true, describe: 'chat export JSON' })
          .option('config', { type: 'string', describe: 'training config JSON (defaults applied)' })
          .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
          .option('images-dir', {
            type: 'string',
            describe: 'directory holding the referenced page images (default: dataset directory)',
          }),
      () => undefined,
    )
    .demandCommand(1)
    .strict()
    .exitProcess(false)
    .fail((msg, err) => {
      throw err ?? new Error(msg);
    });

  let parsed;
  try {
    parsed = await parser.parse();
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    return 2;
  }
  try {
    const datasetPath = parsed.dataset as string;
    const imagesDir =
      (parsed['images-dir'] as string | undefined) ??
      datasetPath.slice(0, Math.max(datasetPath.lastIndexOf('/'), 0)) ??
      '.';
    const config = loadTrainingConfig(parsed.config as string | undefined);
    const { log, adapterFiles } = train(datasetPath, config, parsed.out as string, imagesDir || '.');
    const means = epochMeanLosses(log);
    console.log(
      JSON.stringify({
        steps: log.steps.length,
        epoch_mean_losses: means,
        adapters: adapterFiles,
        wall_time_s: log.wall_time_s,
      }),
    );
    return 0;
  } catch (err) {
    console.error(JSON.stringify({ error: (err as Error).constructor.name, message: String((err as Error).message) }));
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] && (process.argv[1].endsWith('cli.js') || process.argv[1].endsWith('cli.ts'));
if (invokedDirectly) {
  main().then((code) => {
    process.exitCode = code;
  });
}
