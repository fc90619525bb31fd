#!/usr/bin/env node
/**
 * embed-export export      --manifest <bags.json> --model <bundle-dir> --out <archive>
 * embed-export export-text --prompts <dir>        --model <bundle-dir> --out <features.json>
 *
 * The model bundle directory is a required identifier; there is no default.
 */
import { parseArgs } from 'node:util';
import { exportInstances, exportTextFeatures } from './export.js';

function usage(): never {
  console.error(
    [
      'usage:',
      '  embed-export export --manifest <bags.json> --model <bundle-dir> --out <archive>',
      '  embed-export export-text --prompts <dir> --model <bundle-dir> --out <features.json>',
    ].join('\n'),
  );
  process.exit(2);
}

export async function main(argv: string[]): Promise<number> {
  const command = argv[0];
  if (command === 'export') {
    const { values } = parseArgs({
      args: argv.slice(1),
      options: {
        manifest: { type: 'string' },
        model: { type: 'string' },
        out: { type: 'string' },
      },
    });
    if (!values.manifest || !values.model || !values.out) usage();
    const { manifest, report } = await exportInstances(values.manifest, values.model, values.out);
    console.log(
      `wrote ${values.out}: ${manifest.bag_count} bags, ${report.instance_count} instances, ` +
        `m=${report.feature_dim}, skipped ${report.skipped.length} patches`,
    );
    return 0;
  }
  if (command === 'export-text') {
    const { values } = parseArgs({
      args: argv.slice(1),
      options: {
        prompts: { type: 'string' },
        model: { type: 'string' },
        out: { type: 'string' },
      },
    });
    if (!values.prompts || !values.model || !values.out) usage();
    const features = await exportTextFeatures(values.prompts, values.model, values.out);
    console.log(`wrote ${values.out}: ${features.length} text features`);
    return 0;
  }
  usage();
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url.endsWith(process.argv[1].split('/').pop()!);
if (invokedDirectly) {
  main(process.argv.slice(2))
    .then((code) => process.exit(code))
    .catch((err) => {
      console.error(JSON.stringify({ error: err instanceof Error ? err.message : String(err) }));
      process.exit(1);
    });
}
